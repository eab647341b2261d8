//! Integration tests for the training pipelines: determinism contracts,
//! freeze discipline, endpoint equivalences, and evaluation semantics.

mod common;

use common::*;

use kdlab::data::{gen_synthetic, Dataset, SynthSpec};
use kdlab::distill::{
    distill_joint, distill_kd, distill_kd_from, distill_simkd, evaluate_merged, evaluate_model,
    evaluate_simkd, multi_teacher, sequential_linear_eval, train_model, MergedAssembly, MethodName,
    MultiOutcome, MultiTeacherVariant, ProjectorSettings, SimkdAssembly,
};
use kdlab::layer::{LayerSpec, Shape};
use kdlab::losses::softmax_t;
use kdlab::network::{Mode, Model, NetworkSpec};
use kdlab::projector::ProjectorKind;
use kdlab::rng::Rng;
use kdlab::tensor::Tensor;

#[test]
fn zero_epochs_reports_initial_state_only() {
    let (train, test) = tiny_data(1);
    let data = tiny_split(&train, &test);
    let spec = tiny_cnn((3, 4), 3, 2);
    let cfg = fast_cfg(MethodName::Baseline, 0, 7);
    let (model, report) = train_model(&spec, &data, &cfg).unwrap();
    assert!(report.epochs.is_empty());
    assert!(report.final_train_loss.is_none());
    assert!(report.final_top1 >= 0.0 && report.final_top1 <= 100.0);
    // the model equals a fresh build with the same seed
    let fresh = Model::build(&spec, &Rng::new(7).child("init.student")).unwrap();
    assert_eq!(model.net.params(), fresh.net.params());
}

#[test]
fn training_is_seed_deterministic() {
    let (train, test) = tiny_data(2);
    let data = tiny_split(&train, &test);
    let spec = tiny_cnn((3, 4), 3, 2);
    let cfg = fast_cfg(MethodName::Baseline, 3, 11);
    let (a, ra) = train_model(&spec, &data, &cfg).unwrap();
    let (b, rb) = train_model(&spec, &data, &cfg).unwrap();
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(a.net.running(), b.net.running());
    assert_eq!(ra.final_top1, rb.final_top1);
    for (ea, eb) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(ea.train_loss.to_bits(), eb.train_loss.to_bits());
        assert_eq!(ea.test_top1.to_bits(), eb.test_top1.to_bits());
    }
    let cfg2 = fast_cfg(MethodName::Baseline, 3, 12);
    let (c, _) = train_model(&spec, &data, &cfg2).unwrap();
    assert_ne!(a.net.params(), c.net.params());
}

#[test]
fn separable_linear_data_reaches_full_train_accuracy() {
    // Two classes with constant, well-separated images: a linear model on raw
    // pixels must fit the training set perfectly.
    let mut images = Tensor::zeros(&[40, 1, 2, 2]);
    let mut labels = Vec::new();
    let mut rng = Rng::new(5);
    for i in 0..40 {
        let class = i % 2;
        let base = if class == 0 { 0.2 } else { 0.8 };
        for j in 0..4 {
            images.data_mut()[i * 4 + j] = base + rng.uniform(-0.05, 0.05);
        }
        labels.push(class as u8);
    }
    let train = Dataset {
        images,
        labels,
        num_classes: 2,
    };
    let test = train.clone();
    let data = kdlab::distill::SplitData::plain(&train, &test);
    let spec = NetworkSpec {
        input: Shape::Map { c: 1, h: 2, w: 2 },
        encoder: vec![LayerSpec::Flatten],
        block_boundaries: vec![],
        feature_dim: 4,
        num_classes: 2,
    };
    let mut cfg = fast_cfg(MethodName::Baseline, 30, 3);
    cfg.lr = 0.5;
    cfg.weight_decay = 0.0;
    let (model, _) = train_model(&spec, &data, &cfg).unwrap();
    let m = evaluate_model(&model, &train, &data.norm).unwrap();
    assert_eq!(
        m.top1, 100.0,
        "separable data must be fit exactly, got {}",
        m.top1
    );
}

#[test]
fn kd_with_copied_teacher_and_zero_lr_matches_teacher() {
    // Batch-norm-free net: with lr = 0 the student is a bitwise no-op copy of
    // the teacher (running statistics would otherwise keep updating during
    // train-mode epochs, which is their documented semantics).
    let (train, test) = tiny_data(3);
    let data = tiny_split(&train, &test);
    let spec = NetworkSpec {
        input: Shape::Map { c: 2, h: 4, w: 4 },
        encoder: vec![
            LayerSpec::Conv {
                in_ch: 2,
                out_ch: 4,
                kernel: 3,
                depthwise: false,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Flatten,
        ],
        block_boundaries: vec![],
        feature_dim: 4,
        num_classes: 3,
    };
    let mut teacher_cfg = fast_cfg(MethodName::Teacher, 4, 21);
    teacher_cfg.lr = 0.1;
    let (teacher, _) = train_model(&spec, &data, &teacher_cfg).unwrap();

    // student := copy of the teacher, lr = 0
    let mut student = Model::build(&spec, &Rng::new(99)).unwrap();
    let teacher_tensors: kdlab::network::ParamMap = teacher
        .net
        .named_tensors()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    student.net.load_from(&teacher_tensors).unwrap();

    let mut cfg = fast_cfg(MethodName::Kd, 2, 22);
    cfg.lr = 0.0;
    let (student, report) = distill_kd_from(&teacher, student, &data, &cfg).unwrap();
    let t_metrics = evaluate_model(&teacher, &test, &data.norm).unwrap();
    assert_eq!(report.final_top1, t_metrics.top1);
    // with zero gradient steps the student is still the teacher bitwise
    let s_metrics = evaluate_model(&student, &test, &data.norm).unwrap();
    assert_eq!(s_metrics.top1, t_metrics.top1);
    assert_eq!(s_metrics.nll.to_bits(), t_metrics.nll.to_bits());
}

#[test]
fn kd_loss_gradient_vanishes_when_teacher_equals_student() {
    // With identical logits the KL term contributes nothing: distilling a
    // model into itself at lr=0 keeps loss == plain CE.
    let (train, test) = tiny_data(4);
    let data = tiny_split(&train, &test);
    let spec = tiny_cnn((3, 4), 3, 2);
    let (teacher, _) = train_model(&spec, &data, &fast_cfg(MethodName::Teacher, 3, 31)).unwrap();
    let logits = {
        let (raw, _) = test.gather(&[0, 1, 2, 3]);
        let x = data.norm.apply(&raw).unwrap();
        teacher
            .net
            .forward(&x, Mode::Eval)
            .unwrap()
            .output()
            .clone()
    };
    let labels = kdlab::losses::one_hot(&test.labels[0..4], 3).unwrap();
    let kd = kdlab::losses::kd_loss(&logits, &logits, &labels, 4.0).unwrap();
    let ce = kdlab::losses::cross_entropy(&logits, &labels).unwrap();
    assert!((kd.value - ce.value).abs() < 1e-12);
    assert!(kd.grad.max_abs_diff(&ce.grad) < 1e-15);
}

#[test]
fn joint_alpha_zero_reproduces_kd_bitwise() {
    let (train, test) = tiny_data(5);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 3, 41)).unwrap();

    let kd_cfg = fast_cfg(MethodName::Kd, 3, 42);
    let (kd_student, kd_report) = distill_kd(&teacher, &s_spec, &data, &kd_cfg).unwrap();

    let mut joint_cfg = fast_cfg(MethodName::Joint, 3, 42);
    joint_cfg.alpha = Some(0.0);
    let (joint_out, joint_report) = distill_joint(&teacher, &s_spec, &data, &joint_cfg).unwrap();

    assert_eq!(kd_student.net.params(), joint_out.student.net.params());
    assert_eq!(kd_student.net.running(), joint_out.student.net.running());
    for (a, b) in kd_report.epochs.iter().zip(&joint_report.epochs) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.test_top1.to_bits(), b.test_top1.to_bits());
    }
}

#[test]
fn joint_alpha_one_leaves_student_classifier_at_chance() {
    let (train, test) = tiny_data(6);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 4, 51)).unwrap();

    let mut cfg = fast_cfg(MethodName::Joint, 4, 52);
    cfg.alpha = Some(1.0);
    let (out, report) = distill_joint(&teacher, &s_spec, &data, &cfg).unwrap();

    // the student classifier received no gradient: bitwise at init
    let init = Model::build(&s_spec, &Rng::new(52).child("init.student")).unwrap();
    let w_name = init.classifier_param_name("weight");
    assert_eq!(
        out.student.net.params().get(&w_name).unwrap(),
        init.net.params().get(&w_name).unwrap()
    );
    // its accuracy is near chance (3 classes, tiny test set: allow wide band
    // around 33%), while the teacher head exists and was trained
    assert!(
        report.final_top1 <= 70.0,
        "untrained head suspiciously good: {}",
        report.final_top1
    );
    assert!(report.final_second_top1.is_some());
}

#[test]
fn simkd_freezes_the_teacher_and_ignores_labels() {
    let (train, test) = tiny_data(7);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 3, 61)).unwrap();
    let before: Vec<(String, Tensor)> = teacher
        .net
        .named_tensors()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();

    let cfg = fast_cfg(MethodName::Simkd, 3, 62);
    let (assembly, report) = distill_simkd(&teacher, &s_spec, &data, &cfg).unwrap();
    for (name, tensor) in before {
        let now = assembly
            .teacher
            .net
            .named_tensors()
            .find(|(n, _)| **n == name)
            .unwrap()
            .1;
        assert_eq!(now, &tensor, "teacher tensor {name} changed");
    }
    assert!(report.final_l2.is_some());

    // label permutation leaves learned parameters bitwise unchanged
    let mut permuted = train.clone();
    permuted.labels.rotate_left(5);
    let pdata = tiny_split(&permuted, &test);
    let (assembly2, _) = distill_simkd(&teacher, &s_spec, &pdata, &cfg).unwrap();
    assert_eq!(assembly.student.params(), assembly2.student.params());
    assert_eq!(assembly.projector.params(), assembly2.projector.params());
}

#[test]
fn simkd_plus_freezes_tail_and_partitions_params() {
    let (train, test) = tiny_data(8);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 3, 71)).unwrap();

    let mut cfg = fast_cfg(MethodName::SimkdPlus, 2, 72);
    cfg.k = Some(1);
    let (assembly, report) = distill_simkd(&teacher, &s_spec, &data, &cfg).unwrap();
    // the student prefix stops at the first block boundary
    assert_eq!(assembly.student.layers().len(), 3);
    assert_eq!(assembly.teacher_cut, 3);
    // tail + prefix partition the teacher
    let budget = assembly.budget(&s_spec);
    let prefix = kdlab::network::param_count_layers(&t_spec.encoder[..assembly.teacher_cut]);
    assert_eq!(prefix + budget.tc, teacher.param_count());
    assert!(report.pruning_ratio.is_some());
    // frozen tail bitwise unchanged is covered by the teacher-freeze test;
    // here check determinism of the k=1 path
    let (assembly2, _) = distill_simkd(&teacher, &s_spec, &data, &cfg).unwrap();
    assert_eq!(assembly.student.params(), assembly2.student.params());
}

#[test]
fn spatial_alignment_bridges_mismatched_maps() {
    // Student keeps 4x4 maps (no pool) while the teacher pools to 2x2: the
    // student side must be average-pooled before the projector.
    let (train, test) = tiny_data(9);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2); // pools to 2x2
    let s_spec = NetworkSpec {
        input: Shape::Map { c: 2, h: 4, w: 4 },
        encoder: vec![
            LayerSpec::Conv {
                in_ch: 2,
                out_ch: 3,
                kernel: 3,
                depthwise: false,
            },
            LayerSpec::BatchNorm { channels: 3 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Flatten,
        ],
        block_boundaries: vec![],
        feature_dim: 3,
        num_classes: 3,
    };
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 2, 81)).unwrap();
    let cfg = fast_cfg(MethodName::Simkd, 2, 82);
    let (assembly, report) = distill_simkd(&teacher, &s_spec, &data, &cfg).unwrap();
    assert_eq!(assembly.student_pool, Some((2, 2)));
    assert!(report.final_l2.unwrap().is_finite());

    // with alignment disabled the same mismatch is a configuration error
    let mut cfg = cfg;
    cfg.projector = ProjectorSettings {
        spatial_align: false,
        ..ProjectorSettings::default()
    };
    assert!(distill_simkd(&teacher, &s_spec, &data, &cfg).is_err());
}

#[test]
fn sequential_eval_freezes_assembly_and_fits_separable_features() {
    let (train, test) = tiny_data(10);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 6, 91)).unwrap();
    let (assembly, _) = distill_simkd(
        &teacher,
        &s_spec,
        &data,
        &fast_cfg(MethodName::Simkd, 4, 92),
    )
    .unwrap();

    let student_before = assembly.student.params().clone();
    let proj_before = assembly.projector.params().clone();
    let cfg = fast_cfg(MethodName::Sequential, 4, 93);
    let (head, report) = sequential_linear_eval(&assembly, &data, &cfg).unwrap();
    assert_eq!(assembly.student.params(), &student_before);
    assert_eq!(assembly.projector.params(), &proj_before);
    assert!(head.param_count() > 0);
    assert!(report.final_top1 >= 0.0);
}

#[test]
fn sequential_eval_on_separable_features_is_near_perfect() {
    // An easy dataset and a strong teacher make the (perfectly aligned)
    // projected features linearly separable by construction, so the fresh
    // classifier must recover nearly all of the teacher's accuracy.
    let (train, test) = gen_synthetic(&SynthSpec {
        classes: 3,
        per_class: 30,
        test_per_class: 10,
        height: 4,
        width: 4,
        channels: 2,
        difficulty: 0.9,
        seed: 33,
        max_shift: 0,
    })
    .unwrap();
    let data = kdlab::distill::SplitData::plain(&train, &test);
    let t_spec = tiny_cnn((6, 8), 3, 2);
    let mut tc = fast_cfg(MethodName::Teacher, 25, 94);
    tc.lr_milestones = vec![15, 20];
    let (teacher, t_rep) = train_model(&t_spec, &data, &tc).unwrap();
    assert!(
        t_rep.final_top1 >= 95.0,
        "easy data should be solved, got {}",
        t_rep.final_top1
    );

    // perfect-alignment assembly: student := teacher copy, identity projector
    let settings = ProjectorSettings {
        kind: ProjectorKind::LinearVector,
        r: 1,
        spatial_align: false,
    };
    let mut assembly = SimkdAssembly::build(&teacher, &t_spec, &settings, 0, &Rng::new(0)).unwrap();
    let copy = teacher.encoder_net("student");
    let tensors: kdlab::network::ParamMap = copy
        .named_tensors()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    assembly.student.load_from(&tensors).unwrap();
    let c = t_spec.feature_dim;
    let mut ident = kdlab::network::ParamMap::new();
    ident.insert("proj.0.weight".to_string(), Tensor::eye(c));
    ident.insert("proj.0.bias".to_string(), Tensor::zeros(&[c]));
    assembly.projector.load_from(&ident).unwrap();

    let mut cfg = fast_cfg(MethodName::Sequential, 30, 95);
    cfg.lr = 0.2;
    cfg.lr_milestones = vec![20, 26];
    let (_, report) = sequential_linear_eval(&assembly, &data, &cfg).unwrap();
    assert!(
        report.final_top1 >= t_rep.final_top1 - 10.0,
        "linear eval on separable features should be near the teacher: {} vs {}",
        report.final_top1,
        t_rep.final_top1
    );
}

#[test]
fn simkd_plus_k0_is_plain_simkd_bitwise() {
    let (train, test) = tiny_data(18);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 3, 161)).unwrap();

    let cfg = fast_cfg(MethodName::Simkd, 3, 162);
    let (plain, _) = distill_simkd(&teacher, &s_spec, &data, &cfg).unwrap();
    let mut plus_cfg = fast_cfg(MethodName::SimkdPlus, 3, 162);
    plus_cfg.k = Some(0);
    let (plus, _) = distill_simkd(&teacher, &s_spec, &data, &plus_cfg).unwrap();
    assert_eq!(plain.student.params(), plus.student.params());
    assert_eq!(plain.projector.params(), plus.projector.params());
    assert_eq!(plain.teacher_cut, plus.teacher_cut);
}

#[test]
fn aveg_with_identical_teachers_matches_single_teacher_kd() {
    let (train, test) = tiny_data(11);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 3, 101)).unwrap();

    let kd_cfg = fast_cfg(MethodName::Kd, 3, 102);
    let (kd_student, _) = distill_kd(&teacher, &s_spec, &data, &kd_cfg).unwrap();

    let mut mt_cfg = fast_cfg(MethodName::MultiTeacher, 3, 102);
    mt_cfg.variant = Some(MultiTeacherVariant::Aveg);
    let teachers = vec![teacher.clone(), teacher.clone()];
    let (out, _) = multi_teacher(&teachers, &s_spec, &data, &mt_cfg).unwrap();
    let MultiOutcome::Student(mt_student) = out else {
        panic!("prediction averaging returns a plain student");
    };
    // the mean of two identical prediction tensors is exact, so the whole
    // trajectory coincides bitwise
    assert_eq!(kd_student.net.params(), mt_student.net.params());

    // heterogeneous class counts are rejected
    let bad_teacher = Model::build(&tiny_cnn((4, 6), 4, 2), &Rng::new(1)).unwrap();
    let teachers = vec![teacher.clone(), bad_teacher];
    assert!(multi_teacher(&teachers, &s_spec, &data, &mt_cfg).is_err());

    // fewer than two teachers is rejected
    assert!(multi_teacher(&[teacher], &s_spec, &data, &mt_cfg).is_err());
}

#[test]
fn multi_teacher_alignment_variants_run() {
    let (train, test) = tiny_data(12);
    let data = tiny_split(&train, &test);
    let s_spec = tiny_cnn((2, 3), 3, 2);
    let (t1, _) = train_model(
        &tiny_cnn((4, 6), 3, 2),
        &data,
        &fast_cfg(MethodName::Teacher, 3, 111),
    )
    .unwrap();
    let (t2, _) = train_model(
        &tiny_cnn((3, 4), 3, 2),
        &data,
        &fast_cfg(MethodName::Teacher, 3, 112),
    )
    .unwrap();
    let teachers = vec![t1, t2];

    let mut cfg = fast_cfg(MethodName::MultiTeacher, 2, 113);
    cfg.variant = Some(MultiTeacherVariant::Simkd);
    let (out, report) = multi_teacher(&teachers, &s_spec, &data, &cfg).unwrap();
    assert!(matches!(out, MultiOutcome::Assemblies(_)));
    assert!(report.final_top1 >= 0.0);

    cfg.variant = Some(MultiTeacherVariant::SimkdV);
    let (out, report) = multi_teacher(&teachers, &s_spec, &data, &cfg).unwrap();
    let MultiOutcome::Merged(merged) = out else {
        panic!("merged head expected")
    };
    // parameter accounting: encoder + K x C_s + K, nothing else
    assert_eq!(
        merged.param_count(),
        merged.encoder.param_count() + (3 * s_spec.feature_dim + 3) as u64
    );
    assert!(report.final_top1 >= 0.0);
}

#[test]
fn simkd_v_single_teacher_identity_merge_is_teacher() {
    // Degenerate merge: the student encoder is a bitwise copy of the teacher
    // encoder and the linear projector is the identity. The merged head then
    // equals the teacher classifier and every prediction matches.
    let (train, test) = tiny_data(13);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 5, 121)).unwrap();

    let encoder = teacher.encoder_net("student");
    let c = t_spec.feature_dim;
    let (w, b) = kdlab::projector::merge_linear_projector(
        teacher.classifier_weight(),
        teacher.classifier_bias(),
        &Tensor::eye(c),
        &Tensor::zeros(&[c]),
    )
    .unwrap();
    let merged = MergedAssembly {
        encoder,
        weight: w,
        bias: b,
    };
    let tm = evaluate_model(&teacher, &test, &data.norm).unwrap();
    let mm = evaluate_merged(&merged, &test, &data.norm).unwrap();
    assert_eq!(tm.top1, mm.top1);
    assert_eq!(tm.nll.to_bits(), mm.nll.to_bits());
}

#[test]
fn perfect_alignment_reproduces_teacher_exactly() {
    // Teacher-copy student + identity linear projector: reused-classifier
    // predictions equal teacher predictions sample by sample.
    let (train, test) = tiny_data(14);
    let data = tiny_split(&train, &test);
    let t_spec = tiny_cnn((4, 6), 3, 2);
    let (teacher, _) = train_model(&t_spec, &data, &fast_cfg(MethodName::Teacher, 5, 131)).unwrap();

    let settings = ProjectorSettings {
        kind: ProjectorKind::LinearVector,
        ..Default::default()
    };
    let mut assembly = SimkdAssembly::build(&teacher, &t_spec, &settings, 0, &Rng::new(0)).unwrap();
    // overwrite trainable parts: student prefix := teacher encoder copy,
    // projector := exact identity
    let copy = teacher.encoder_net("student");
    let tensors: kdlab::network::ParamMap = copy
        .named_tensors()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    assembly.student.load_from(&tensors).unwrap();
    let c = t_spec.feature_dim;
    let mut ident = kdlab::network::ParamMap::new();
    ident.insert("proj.0.weight".to_string(), Tensor::eye(c));
    ident.insert("proj.0.bias".to_string(), Tensor::zeros(&[c]));
    assembly.projector.load_from(&ident).unwrap();

    let tm = evaluate_model(&teacher, &test, &data.norm).unwrap();
    let am = evaluate_simkd(&assembly, &test, &data.norm).unwrap();
    assert_eq!(
        am.top1, tm.top1,
        "reused-classifier accuracy must equal the teacher's exactly"
    );
    assert_eq!(
        am.l2,
        Some(0.0),
        "aligned features must have zero alignment loss"
    );
}

#[test]
fn evaluation_matches_argmax_recount_and_uniform_limits() {
    let (train, test) = tiny_data(15);
    let data = tiny_split(&train, &test);
    let spec = tiny_cnn((3, 4), 3, 2);

    // uniform predictor: zero classifier on top of anything
    let mut model = Model::build(&spec, &Rng::new(7)).unwrap();
    let wname = model.classifier_param_name("weight");
    let bname = model.classifier_param_name("bias");
    model.net.params_mut().insert(wname, Tensor::zeros(&[3, 4]));
    model.net.params_mut().insert(bname, Tensor::zeros(&[3]));
    model.set_mode(Mode::Eval);
    let m = evaluate_model(&model, &test, &data.norm).unwrap();
    assert!((m.nll - 3.0f64.ln()).abs() < 1e-12);
    // ties break toward class 0; the test set is balanced over 3 classes
    assert!((m.top1 - 100.0 / 3.0).abs() < 1e-9);

    // independent per-sample argmax recount on a trained model
    let (trained, _) = train_model(&spec, &data, &fast_cfg(MethodName::Baseline, 3, 141)).unwrap();
    let metrics = evaluate_model(&trained, &test, &data.norm).unwrap();
    let mut correct = 0;
    for i in 0..test.len() {
        let (raw, labels) = test.gather(&[i]);
        let x = data.norm.apply(&raw).unwrap();
        let logits = trained
            .net
            .forward(&x, Mode::Eval)
            .unwrap()
            .output()
            .clone();
        let row = logits.data();
        let mut best = 0;
        for j in 1..3 {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[0] as usize {
            correct += 1;
        }
    }
    assert_eq!(metrics.top1, 100.0 * correct as f64 / test.len() as f64);
}

#[test]
fn aveg_mean_probabilities_match_manual_average() {
    // sanity on the averaged-soft-target construction
    let mut rng = Rng::new(9);
    let a = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let pa = softmax_t(&a, 4.0).unwrap();
    let pb = softmax_t(&b, 4.0).unwrap();
    let mean = pa.add(&pb).unwrap().scale(0.5);
    for row in 0..2 {
        let s: f64 = mean.data()[row * 3..(row + 1) * 3].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn raw_pixel_linear_model_cannot_solve_default_difficulty() {
    // Per-sample shifts plus pixel noise keep a linear model on raw pixels
    // away from perfect accuracy at the default difficulty.
    let (train, test) = gen_synthetic(&SynthSpec {
        classes: 6,
        per_class: 24,
        test_per_class: 12,
        height: 8,
        width: 8,
        channels: 2,
        difficulty: 0.5,
        seed: 77,
        max_shift: 1,
    })
    .unwrap();
    let data = kdlab::distill::SplitData::plain(&train, &test);
    let spec = NetworkSpec {
        input: Shape::Map { c: 2, h: 8, w: 8 },
        encoder: vec![LayerSpec::Flatten],
        block_boundaries: vec![],
        feature_dim: 128,
        num_classes: 6,
    };
    let mut cfg = fast_cfg(MethodName::Baseline, 25, 171);
    cfg.lr = 0.1;
    cfg.lr_milestones = vec![15, 20];
    let (_, report) = train_model(&spec, &data, &cfg).unwrap();
    assert!(
        report.final_top1 < 100.0,
        "linear model should not solve the task"
    );
    assert!(report.final_top1 > 100.0 / 6.0, "but it should beat chance");
}

#[test]
fn empty_dataset_is_an_input_error() {
    let (train, test) = tiny_data(16);
    let spec = tiny_cnn((3, 4), 3, 2);
    let empty = Dataset {
        images: Tensor::zeros(&[1, 2, 4, 4]),
        labels: vec![],
        num_classes: 3,
    };
    // label/image count mismatch aside, an empty label set must be rejected
    let data = kdlab::distill::SplitData::plain(&empty, &test);
    assert!(train_model(&spec, &data, &fast_cfg(MethodName::Baseline, 1, 1)).is_err());
    let data = kdlab::distill::SplitData::plain(&train, &empty);
    assert!(train_model(&spec, &data, &fast_cfg(MethodName::Baseline, 1, 1)).is_err());
}

#[test]
fn class_count_mismatch_is_a_configuration_error() {
    let (train, test) = tiny_data(17);
    let data = tiny_split(&train, &test);
    let (teacher, _) = train_model(
        &tiny_cnn((4, 6), 3, 2),
        &data,
        &fast_cfg(MethodName::Teacher, 2, 151),
    )
    .unwrap();
    // a 4-class student against a 3-class teacher
    let four = gen_synthetic(&SynthSpec {
        classes: 4,
        per_class: 8,
        test_per_class: 4,
        height: 4,
        width: 4,
        channels: 2,
        difficulty: 0.7,
        seed: 1,
        max_shift: 1,
    })
    .unwrap();
    let data4 = kdlab::distill::SplitData::plain(&four.0, &four.1);
    let s_spec = tiny_cnn((2, 3), 4, 2);
    assert!(distill_kd(&teacher, &s_spec, &data4, &fast_cfg(MethodName::Kd, 1, 1)).is_err());
}
