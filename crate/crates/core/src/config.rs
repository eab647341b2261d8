//! Experiment configuration: a JSON document validated strictly (unknown keys
//! rejected) before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Normalization, SynthSpec};
use crate::distill::{DistillConfig, MethodName};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    /// Multi-teacher runs list every teacher here instead.
    #[serde(default)]
    pub teachers: Vec<TeacherConfig>,
    #[serde(default)]
    pub student: Option<StudentConfig>,
    pub distill: DistillConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory containing `train.skdd` and `test.skdd`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Alternatively, generate the dataset in memory.
    #[serde(default)]
    pub generator: Option<SynthSpec>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default = "AugmentConfig::default")]
    pub augmentation: AugmentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub spec: NetworkSpec,
    /// Trained weights; required for distillation, absent when training the
    /// teacher itself.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub spec: NetworkSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.generator) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "data.path and data.generator are mutually exclusive".to_string(),
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "one of data.path or data.generator is required".to_string(),
                ))
            }
            _ => {}
        }
        if let Some(g) = &self.data.generator {
            g.validate()?;
        }
        self.distill.validate()?;
        if let Some(t) = &self.teacher {
            t.spec.validate()?;
        }
        for t in &self.teachers {
            t.spec.validate()?;
        }
        if let Some(s) = &self.student {
            s.spec.validate()?;
        }
        // method-specific presence checks
        match self.distill.method {
            MethodName::Teacher => {
                if self.teacher.is_none() {
                    return Err(Error::config(
                        "training a teacher requires teacher.spec".to_string(),
                    ));
                }
            }
            MethodName::Baseline => {
                if self.student.is_none() {
                    return Err(Error::config(
                        "baseline training requires student.spec".to_string(),
                    ));
                }
            }
            MethodName::MultiTeacher => {
                if self.teachers.len() < 2 {
                    return Err(Error::config(
                        "multi-teacher runs need at least two entries in teachers".to_string(),
                    ));
                }
                if self.student.is_none() {
                    return Err(Error::config(
                        "distillation requires student.spec".to_string(),
                    ));
                }
            }
            _ => {
                if self.teacher.is_none() {
                    return Err(Error::config(
                        "distillation requires a teacher section".to_string(),
                    ));
                }
                if self.student.is_none() {
                    return Err(Error::config(
                        "distillation requires student.spec".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Channel count implied by the dataset source (for normalization checks).
    pub fn effective_normalization(&self, channels: usize) -> Result<Normalization> {
        match &self.data.normalization {
            Some(n) => {
                n.validate(channels)?;
                Ok(n.clone())
            }
            None => Ok(Normalization::identity(channels)),
        }
    }
}
