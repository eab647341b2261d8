//! Experiment orchestration on top of the pipelines: dataset resolution,
//! teacher loading, method dispatch, checkpoint/CSV emission, feature export.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::{ExperimentConfig, TeacherConfig};
use crate::data::{gen_synthetic, read_dataset, Dataset, Normalization};
use crate::distill::{
    distill_joint, distill_kd, distill_simkd, evaluate_merged, evaluate_model, evaluate_multi,
    evaluate_simkd, multi_teacher, sequential_linear_eval, train_model, EvalMetrics, JointOutcome,
    MethodName, MultiOutcome, ParamBudget, SimkdAssembly, SplitData, TrainReport,
};
use crate::error::{Error, Result};
use crate::losses::log_softmax_t;
use crate::metrics::{append_rows, report_rows};
use crate::network::{Mode, Model, Net, NetworkSpec, ParamMap};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A loaded experiment: config plus resolved train/test data.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub norm: Normalization,
}

/// Everything a distillation run can produce.
pub enum Artifact {
    Model(Model),
    Simkd(SimkdAssembly),
    Joint(JointOutcome),
    Linear { assembly: SimkdAssembly, head: Net },
    Multi(MultiOutcome),
}

impl Experiment {
    pub fn load(config_path: &Path) -> Result<Experiment> {
        Self::from_config(ExperimentConfig::from_file(config_path)?)
    }

    pub fn from_config(cfg: ExperimentConfig) -> Result<Experiment> {
        let (train, test) = match (&cfg.data.path, &cfg.data.generator) {
            (Some(dir), None) => {
                let train = read_dataset(&dir.join("train.skdd"))?;
                let test = read_dataset(&dir.join("test.skdd"))?;
                (train, test)
            }
            (None, Some(spec)) => gen_synthetic(spec)?,
            _ => {
                return Err(Error::config(
                    "exactly one data source required".to_string(),
                ))
            }
        };
        let (c, _, _) = train.dims();
        let norm = cfg.effective_normalization(c)?;
        Ok(Experiment {
            cfg,
            train,
            test,
            norm,
        })
    }

    pub fn split(&self) -> SplitData<'_> {
        SplitData {
            train: &self.train,
            test: &self.test,
            norm: self.norm.clone(),
            augment: self.cfg.data.augmentation.clone(),
        }
    }

    fn teacher_cfg(&self) -> Result<&TeacherConfig> {
        self.cfg
            .teacher
            .as_ref()
            .ok_or_else(|| Error::config("config has no teacher section".to_string()))
    }

    fn student_spec(&self) -> Result<&NetworkSpec> {
        self.cfg
            .student
            .as_ref()
            .map(|s| &s.spec)
            .ok_or_else(|| Error::config("config has no student section".to_string()))
    }

    /// Build the teacher from its spec and load the checkpoint weights.
    pub fn teacher_model(&self) -> Result<Model> {
        let tc = self.teacher_cfg()?;
        load_teacher(tc)
    }

    pub fn teacher_models(&self) -> Result<Vec<Model>> {
        self.cfg.teachers.iter().map(load_teacher).collect()
    }

    /// Run the configured method. Returns the artifact and its report.
    pub fn run(&self) -> Result<(Artifact, TrainReport)> {
        let data = self.split();
        let cfg = &self.cfg.distill;
        match cfg.method {
            MethodName::Teacher => {
                let spec = &self.teacher_cfg()?.spec;
                let (model, report) = train_model(spec, &data, cfg)?;
                let mut report = report;
                report.pruning_ratio = Some(0.0);
                Ok((Artifact::Model(model), report))
            }
            MethodName::Baseline => {
                let spec = self.student_spec()?;
                let (model, mut report) = train_model(spec, &data, cfg)?;
                // The baseline ratio is defined against the configured teacher
                // when one is present.
                if let Some(t) = &self.cfg.teacher {
                    let budget = ParamBudget {
                        se: spec.encoder_param_count(),
                        proj: 0,
                        t: t.spec.param_count(),
                        tc: spec.classifier_param_count(),
                        sc: spec.classifier_param_count(),
                    };
                    report.pruning_ratio = Some(crate::distill::pruning_ratio(&budget)?);
                }
                Ok((Artifact::Model(model), report))
            }
            MethodName::Kd => {
                let teacher = self.teacher_model()?;
                let (model, report) = distill_kd(&teacher, self.student_spec()?, &data, cfg)?;
                Ok((Artifact::Model(model), report))
            }
            MethodName::Simkd | MethodName::SimkdPlus => {
                let teacher = self.teacher_model()?;
                let (assembly, report) = distill_simkd(&teacher, self.student_spec()?, &data, cfg)?;
                Ok((Artifact::Simkd(assembly), report))
            }
            MethodName::Joint => {
                let teacher = self.teacher_model()?;
                let (out, report) = distill_joint(&teacher, self.student_spec()?, &data, cfg)?;
                Ok((Artifact::Joint(out), report))
            }
            MethodName::Sequential => {
                let teacher = self.teacher_model()?;
                let (assembly, _) = distill_simkd(&teacher, self.student_spec()?, &data, cfg)?;
                let (head, report) = sequential_linear_eval(&assembly, &data, cfg)?;
                Ok((Artifact::Linear { assembly, head }, report))
            }
            MethodName::MultiTeacher => {
                let teachers = self.teacher_models()?;
                let (out, report) = multi_teacher(&teachers, self.student_spec()?, &data, cfg)?;
                Ok((Artifact::Multi(out), report))
            }
        }
    }

    /// Run, then persist checkpoint + CSV rows into the output directory.
    /// Returns the report and the checkpoint path.
    pub fn run_and_save(&self, run_id: Option<String>) -> Result<(TrainReport, PathBuf)> {
        let (artifact, report) = self.run()?;
        std::fs::create_dir_all(&self.cfg.output.dir)?;
        let ckpt = self
            .cfg
            .output
            .dir
            .join(format!("{}-seed{}.skdc", report.method, report.seed));
        save_artifact(&artifact, &ckpt)?;
        let run_id = run_id.unwrap_or_else(|| default_run_id(&report.method, report.seed));
        let rows = report_rows(&report, &run_id);
        append_rows(&self.cfg.output.dir.join("runs.csv"), &rows)?;
        Ok((report, ckpt))
    }

    /// Rebuild the configured method's artifact skeleton and load weights.
    pub fn load_artifact(&self, ckpt: &Path) -> Result<Artifact> {
        let map = read_checkpoint(ckpt)?;
        let cfg = &self.cfg.distill;
        match cfg.method {
            MethodName::Teacher => {
                let mut model = Model::build(&self.teacher_cfg()?.spec, &Rng::new(0))?;
                model.net.load_from(&map)?;
                model.set_mode(Mode::Eval);
                Ok(Artifact::Model(model))
            }
            MethodName::Baseline | MethodName::Kd => {
                let mut model = Model::build(self.student_spec()?, &Rng::new(0))?;
                model.net.load_from(&map)?;
                model.set_mode(Mode::Eval);
                Ok(Artifact::Model(model))
            }
            MethodName::Simkd | MethodName::SimkdPlus => {
                let teacher = self.teacher_model()?;
                let k = if cfg.method == MethodName::SimkdPlus {
                    cfg.k.unwrap_or(0)
                } else {
                    0
                };
                let mut assembly = SimkdAssembly::build(
                    &teacher,
                    self.student_spec()?,
                    &cfg.projector,
                    k,
                    &Rng::new(cfg.seed),
                )?;
                assembly.load_params(&map)?;
                Ok(Artifact::Simkd(assembly))
            }
            other => Err(Error::config(format!(
                "checkpoint replay is not implemented for method {other:?}"
            ))),
        }
    }

    /// Evaluate an artifact on the test split.
    pub fn evaluate(&self, artifact: &Artifact) -> Result<EvalMetrics> {
        match artifact {
            Artifact::Model(m) => evaluate_model(m, &self.test, &self.norm),
            Artifact::Simkd(a) => evaluate_simkd(a, &self.test, &self.norm),
            Artifact::Joint(j) => evaluate_model(&j.student, &self.test, &self.norm),
            Artifact::Linear { assembly, head } => {
                let (top1, nll) = evaluate_head(assembly, head, &self.test, &self.norm)?;
                Ok(EvalMetrics {
                    top1,
                    nll,
                    l2: None,
                })
            }
            Artifact::Multi(MultiOutcome::Student(m)) => evaluate_model(m, &self.test, &self.norm),
            Artifact::Multi(MultiOutcome::Assemblies(a)) => {
                evaluate_multi(a, &self.test, &self.norm)
            }
            Artifact::Multi(MultiOutcome::Merged(m)) => evaluate_merged(m, &self.test, &self.norm),
        }
    }

    /// Dump penultimate features plus labels as CSV. For alignment artifacts
    /// both the teacher features and the projected student features are
    /// exported, tagged by a `source` column.
    pub fn export_features(&self, artifact: &Artifact, out: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(out)?;
        let dim = match artifact {
            Artifact::Model(m) => m.spec.feature_dim,
            Artifact::Simkd(a) => a.teacher.spec.feature_dim,
            Artifact::Joint(j) => j.student.spec.feature_dim,
            Artifact::Linear { assembly, .. } => assembly.teacher.spec.feature_dim,
            Artifact::Multi(MultiOutcome::Student(m)) => m.spec.feature_dim,
            Artifact::Multi(MultiOutcome::Merged(m)) => match m.encoder.output_shape() {
                crate::layer::Shape::Vector { c } => c,
                _ => {
                    return Err(Error::usage(
                        "merged encoder must end in a vector".to_string(),
                    ))
                }
            },
            Artifact::Multi(MultiOutcome::Assemblies(_)) => {
                return Err(Error::config(
                    "feature export for multi-teacher assemblies is per-teacher; \
                     export the individual runs instead"
                        .to_string(),
                ))
            }
        };
        let mut header = vec!["source".to_string(), "label".to_string()];
        header.extend((0..dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;

        let mut dump = |source: &str, feats: &Tensor, labels: &[u8]| -> Result<()> {
            let [n, d] = feats.dims2()?;
            for row in 0..n {
                let mut rec = vec![source.to_string(), labels[row].to_string()];
                rec.extend(
                    feats.data()[row * d..(row + 1) * d]
                        .iter()
                        .map(|v| v.to_string()),
                );
                w.write_record(&rec)?;
            }
            Ok(())
        };

        for start in (0..self.test.len()).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(self.test.len())).collect();
            let (raw, labels) = self.test.gather(&idx);
            let x = self.norm.apply(&raw)?;
            match artifact {
                Artifact::Model(m) => {
                    let feats = m.net.eval_range(0, m.encoder_len(), &x, Mode::Eval)?;
                    dump("model", &feats, &labels)?;
                }
                Artifact::Simkd(a) | Artifact::Linear { assembly: a, .. } => {
                    let student = a.classifier_input(&x)?;
                    let teacher =
                        a.teacher
                            .net
                            .eval_range(0, a.teacher.encoder_len(), &x, Mode::Eval)?;
                    dump("student", &student, &labels)?;
                    dump("teacher", &teacher, &labels)?;
                }
                Artifact::Joint(j) => {
                    let feats =
                        j.student
                            .net
                            .eval_range(0, j.student.encoder_len(), &x, Mode::Eval)?;
                    dump("student", &feats, &labels)?;
                }
                Artifact::Multi(MultiOutcome::Student(m)) => {
                    let feats = m.net.eval_range(0, m.encoder_len(), &x, Mode::Eval)?;
                    dump("student", &feats, &labels)?;
                }
                Artifact::Multi(MultiOutcome::Merged(m)) => {
                    let feats = m.encoder.eval_from(0, &x, Mode::Eval)?;
                    dump("student", &feats, &labels)?;
                }
                Artifact::Multi(MultiOutcome::Assemblies(_)) => unreachable!("rejected above"),
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn evaluate_head(
    assembly: &SimkdAssembly,
    head: &Net,
    test: &Dataset,
    norm: &Normalization,
) -> Result<(f64, f64)> {
    let k = test.num_classes;
    let mut correct = 0usize;
    let mut nll = 0.0;
    for start in (0..test.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(test.len())).collect();
        let (raw, labels) = test.gather(&idx);
        let x = norm.apply(&raw)?;
        let feats = assembly.classifier_input(&x)?;
        let logits = head.eval_from(0, &feats, Mode::Eval)?;
        let logp = log_softmax_t(&logits, 1.0)?;
        for (row, &label) in labels.iter().enumerate() {
            if crate::distill::argmax_row(&logits.data()[row * k..(row + 1) * k]) == label as usize
            {
                correct += 1;
            }
            nll -= logp.data()[row * k + label as usize];
        }
    }
    Ok((
        100.0 * correct as f64 / test.len() as f64,
        nll / test.len() as f64,
    ))
}

fn load_teacher(tc: &TeacherConfig) -> Result<Model> {
    let mut model = Model::build(&tc.spec, &Rng::new(0))?;
    let ckpt = tc.checkpoint.as_ref().ok_or_else(|| {
        Error::config("teacher.checkpoint is required to use a trained teacher".to_string())
    })?;
    let map = read_checkpoint(ckpt)?;
    model.net.load_from(&map)?;
    model.set_mode(Mode::Eval);
    Ok(model)
}

/// Persist an artifact's named tensors.
pub fn save_artifact(artifact: &Artifact, path: &Path) -> Result<()> {
    let mut map = ParamMap::new();
    let mut insert_all = |it: Box<dyn Iterator<Item = (&String, &Tensor)> + '_>| {
        for (name, tensor) in it {
            map.insert(name.clone(), tensor.clone());
        }
    };
    match artifact {
        Artifact::Model(m) => insert_all(Box::new(m.net.named_tensors())),
        Artifact::Simkd(a) => insert_all(Box::new(a.named_tensors())),
        Artifact::Joint(j) => {
            insert_all(Box::new(j.student.net.named_tensors()));
            if let Some(p) = &j.projector {
                insert_all(Box::new(p.named_tensors()));
            }
        }
        Artifact::Linear { assembly, head } => {
            insert_all(Box::new(assembly.named_tensors()));
            insert_all(Box::new(head.named_tensors()));
        }
        Artifact::Multi(MultiOutcome::Student(m)) => insert_all(Box::new(m.net.named_tensors())),
        Artifact::Multi(MultiOutcome::Assemblies(a)) => {
            insert_all(Box::new(a.student.named_tensors()));
            for m in &a.members {
                insert_all(Box::new(m.projector.named_tensors()));
            }
        }
        Artifact::Multi(MultiOutcome::Merged(m)) => {
            insert_all(Box::new(m.encoder.named_tensors()));
            map.insert("merged.weight".to_string(), m.weight.clone());
            map.insert("merged.bias".to_string(), m.bias.clone());
        }
    }
    write_checkpoint(path, map.iter())
}

pub fn default_run_id(method: &str, seed: u64) -> String {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    format!("{method}-s{seed}-{millis}")
}
