//! Grayscale slice renders with tinted mask overlays, as binary PPM.

use crate::grid::Volume3;
use crate::{Error, Result};

const FILL_ALPHA: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct Overlay<'a> {
    pub mask: &'a Volume3,
    pub color: [u8; 3],
}

/// Named colors or `#rrggbb`.
pub fn parse_color(s: &str) -> Option<[u8; 3]> {
    let named = match s {
        "red" => Some([255, 0, 0]),
        "green" => Some([0, 255, 0]),
        "blue" => Some([0, 0, 255]),
        "yellow" => Some([255, 255, 0]),
        "cyan" => Some([0, 255, 255]),
        "magenta" => Some([255, 0, 255]),
        _ => None,
    };
    if named.is_some() {
        return named;
    }
    let hex = s.strip_prefix('#')?;
    if hex.len() != 6 {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).ok();
    Some([byte(0)?, byte(2)?, byte(4)?])
}

/// Slice `index` across `axis` (0 = x, 1 = y, 2 = z). Intensities are
/// windowed to the volume's range; overlays are blended in order, with
/// their in-slice outline drawn in full color.
pub fn render_slice(vol: &Volume3, overlays: &[Overlay<'_>], axis: usize, index: usize) -> Result<Vec<u8>> {
    if axis > 2 {
        return Err(Error::InvalidConfig(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    let dims = vol.grid().dims;
    if index >= dims[axis] {
        return Err(Error::IndexOutOfRange {
            index,
            len: dims[axis],
        });
    }
    for o in overlays {
        vol.grid().ensure_conforms(o.mask.grid())?;
    }
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[u], dims[v]);
    let at = |a: usize, b: usize| {
        let mut c = [0usize; 3];
        c[axis] = index;
        c[u] = a;
        c[v] = b;
        c
    };
    let (lo, hi) = vol
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    // rows run top to bottom with the second in-plane axis increasing upward
    for b in (0..h).rev() {
        for a in 0..w {
            let c = at(a, b);
            let g = (vol.get(c[0], c[1], c[2]) - lo) / span;
            let mut px = [g * 255.0; 3];
            for o in overlays {
                let on = |a: usize, b: usize| {
                    let c = at(a, b);
                    o.mask.get(c[0], c[1], c[2]) > 0.5
                };
                if !on(a, b) {
                    continue;
                }
                let edge = (a > 0 && !on(a - 1, b)) || (a + 1 < w && !on(a + 1, b)) || (b > 0 && !on(a, b - 1)) || (b + 1 < h && !on(a, b + 1));
                let alpha = if edge { 1.0 } else { FILL_ALPHA };
                for ch in 0..3 {
                    px[ch] = (1.0 - alpha) * px[ch] + alpha * o.color[ch] as f64;
                }
            }
            out.extend(px.map(|x| x.round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(out)
}
