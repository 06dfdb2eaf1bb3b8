//! A `register` run on disk: inputs, outputs and the manifest tying them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{read_field, read_json, read_scalar, write_field, write_json, write_scalar};
use crate::energy::LossBreakdown;
use crate::engine::{register, AffineTransform, RegistrationConfig, RegistrationResult};
use crate::{Error, Result};

pub const TOOL_NAME: &str = "cycreg";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterInputs {
    pub moving_mask: PathBuf,
    pub fixed_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_image: Option<PathBuf>,
}

impl RegisterInputs {
    fn absolute(&self) -> Result<Self> {
        let abs = |p: &Path| std::fs::canonicalize(p).map_err(|e| Error::io(p, e));
        Ok(Self {
            moving_mask: abs(&self.moving_mask)?,
            fixed_mask: abs(&self.fixed_mask)?,
            moving_image: self.moving_image.as_deref().map(abs).transpose()?,
            fixed_image: self.fixed_image.as_deref().map(abs).transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub inputs: RegisterInputs,
    pub config: RegistrationConfig,
    /// Output role -> file name inside the run directory.
    pub outputs: BTreeMap<String, String>,
    pub iterations_run: usize,
    pub best_iteration: usize,
    pub wall_time_s: f64,
}

/// In-memory result plus where it was written.
pub struct RunOutputs {
    pub result: RegistrationResult,
    pub manifest: RunManifest,
    pub dir: PathBuf,
}

fn extension_of(path: &Path) -> &str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => "nii",
        _ => "json",
    }
}

/// Registers the input masks and writes fields, warped masks, the loss trace
/// and a manifest into `out_dir`.
pub fn run_register(inputs: &RegisterInputs, cfg: &RegistrationConfig, out_dir: &Path) -> Result<RunOutputs> {
    cfg.validate()?;
    let inputs = inputs.absolute()?;
    let moving = read_scalar(&inputs.moving_mask)?;
    let fixed = read_scalar(&inputs.fixed_mask)?;
    let start = Instant::now();
    let result = register(&moving, &fixed, cfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ext = extension_of(&inputs.moving_mask);
    let mut outputs = BTreeMap::new();
    let mut name = |role: &str, file: String| {
        outputs.insert(role.to_string(), file.clone());
        out_dir.join(file)
    };
    write_field(&name("composed_forward", format!("field_forward.{ext}")), &result.composed_forward)?;
    for (k, f) in result.forward_fields.iter().enumerate() {
        write_field(&name(&format!("forward_{k}"), format!("field_forward_{k}.{ext}")), f)?;
    }
    if let Some(b) = &result.composed_backward {
        write_field(&name("composed_backward", format!("field_backward.{ext}")), b)?;
    }
    for (k, f) in result.backward_fields.iter().enumerate() {
        write_field(&name(&format!("backward_{k}"), format!("field_backward_{k}.{ext}")), f)?;
    }
    write_scalar(&name("warped_mask", format!("warped_mask.{ext}")), &result.warped_mask)?;
    if let Some(c) = &result.cyclic_mask {
        write_scalar(&name("cyclic_mask", format!("cyclic_mask.{ext}")), c)?;
    }
    write_json(&name("affine", "affine.json".into()), &result.affine)?;
    write_json(&name("loss_trace", "loss_trace.json".into()), &result.loss_trace)?;

    let manifest = RunManifest {
        tool: TOOL_NAME.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "register".into(),
        inputs,
        config: cfg.clone(),
        outputs,
        iterations_run: result.iterations_run,
        best_iteration: result.best_iteration,
        wall_time_s,
    };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(RunOutputs {
        result,
        manifest,
        dir: out_dir.to_path_buf(),
    })
}

/// Reruns a manifest into `out_dir` and lists every output whose bytes
/// differ from the original run. Empty means a bit-exact reproduction.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let manifest: RunManifest = read_json(manifest_path)?;
    if manifest.command != "register" {
        return Err(Error::UnsupportedFile {
            path: manifest_path.into(),
            reason: format!("cannot replay command {}", manifest.command),
        });
    }
    let original_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let rerun = run_register(&manifest.inputs, &manifest.config, out_dir)?;
    let mut differ = Vec::new();
    if rerun.manifest.outputs != manifest.outputs {
        differ.push("outputs".to_string());
    }
    for file in manifest.outputs.values() {
        let mut paths = vec![(original_dir.join(file), out_dir.join(file))];
        let raw = original_dir.join(file).with_extension("raw");
        if file.ends_with(".json") && raw.exists() {
            paths.push((raw, out_dir.join(file).with_extension("raw")));
        }
        for (a, b) in paths {
            let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
            if read(&a)? != read(&b)? {
                differ.push(file.clone());
            }
        }
    }
    differ.dedup();
    Ok(differ)
}

/// Rebuilds a registration result from a run directory.
pub fn load_run(dir: &Path) -> Result<(RegistrationResult, RunManifest)> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST))?;
    let file = |role: &str| -> Result<PathBuf> {
        manifest
            .outputs
            .get(role)
            .map(|f| dir.join(f))
            .ok_or_else(|| Error::UnsupportedFile {
                path: dir.join(MANIFEST),
                reason: format!("manifest lists no {role} output"),
            })
    };
    let fields = |prefix: &str| -> Result<Vec<_>> {
        (0..)
            .map(|k| format!("{prefix}_{k}"))
            .take_while(|role| manifest.outputs.contains_key(role))
            .map(|role| read_field(&file(&role)?))
            .collect()
    };
    let loss_trace: Vec<LossBreakdown> = read_json(&file("loss_trace")?)?;
    let affine: AffineTransform = read_json(&file("affine")?)?;
    let optional = |role: &str| manifest.outputs.contains_key(role);
    let result = RegistrationResult {
        mode: manifest.config.mode,
        affine,
        forward_fields: fields("forward")?,
        backward_fields: fields("backward")?,
        composed_forward: read_field(&file("composed_forward")?)?,
        composed_backward: optional("composed_backward")
            .then(|| read_field(&file("composed_backward")?))
            .transpose()?,
        warped_mask: read_scalar(&file("warped_mask")?)?,
        cyclic_mask: optional("cyclic_mask")
            .then(|| read_scalar(&file("cyclic_mask")?))
            .transpose()?,
        loss_trace,
        iterations_run: manifest.iterations_run,
        best_iteration: manifest.best_iteration,
        crop: None,
    };
    Ok((result, manifest))
}
