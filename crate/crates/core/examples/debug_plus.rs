//! Dev tool: inspect the tail-reuse alignment path.

use kdlab::data::gen_synthetic;
use kdlab::distill::{
    distill_simkd, evaluate_model, train_model, DistillConfig, MethodName, ProjectorSettings,
    SplitData,
};
use kdlab::network::Mode;

fn main() {
    // mirror the desk-scale setup from the test helpers
    let synth = kdlab::data::SynthSpec {
        classes: 10,
        per_class: 40,
        test_per_class: 20,
        height: 8,
        width: 8,
        channels: 3,
        difficulty: 0.55,
        seed: 2024,
        max_shift: 1,
    };
    let (train, test) = gen_synthetic(&synth).unwrap();
    let norm = kdlab::data::Normalization { means: vec![0.5; 3], stds: vec![0.25; 3] };
    let data = SplitData {
        train: &train,
        test: &test,
        norm: norm.clone(),
        augment: kdlab::data::AugmentConfig { hflip_prob: 0.5, pad: 1, crop: true },
    };

    let mk = |w: (usize, usize, usize), fd: usize| kdlab::network::NetworkSpec {
        input: kdlab::layer::Shape::Map { c: 3, h: 8, w: 8 },
        encoder: {
            let mut e = Vec::new();
            let cbr = |i, o| {
                vec![
                    kdlab::layer::LayerSpec::Conv { in_ch: i, out_ch: o, kernel: 3, depthwise: false },
                    kdlab::layer::LayerSpec::BatchNorm { channels: o },
                    kdlab::layer::LayerSpec::Relu,
                ]
            };
            e.extend(cbr(3, w.0));
            e.extend(cbr(w.0, w.1));
            e.push(kdlab::layer::LayerSpec::AvgPool { window: 2 });
            e.extend(cbr(w.1, w.2));
            e.push(kdlab::layer::LayerSpec::AvgPool { window: 2 });
            e.push(kdlab::layer::LayerSpec::GlobalAvgPool);
            e.push(kdlab::layer::LayerSpec::Flatten);
            e
        },
        block_boundaries: vec![3, 7, 13],
        feature_dim: fd,
        num_classes: 10,
    };
    let t_spec = mk((16, 16, 32), 32);
    let s_spec = mk((4, 4, 8), 8);

    let base = DistillConfig {
        method: MethodName::Teacher,
        alpha: None,
        k: None,
        variant: None,
        temperature: 4.0,
        epochs: 40,
        batch_size: 64,
        lr: 0.05,
        lr_milestones: vec![20, 30, 35],
        momentum: 0.9,
        weight_decay: 5e-4,
        seed: 100,
        projector: ProjectorSettings::default(),
    };
    let (teacher, trep) = train_model(&t_spec, &data, &base).unwrap();
    println!("teacher {:.2}", trep.final_top1);

    // sanity: feed the teacher's own cut activation through the tail
    let (raw, labels) = test.gather(&(0..200).collect::<Vec<_>>());
    let x = norm.apply(&raw).unwrap();
    let act7 = teacher.net.eval_range(0, 7, &x, Mode::Eval).unwrap();
    let logits = teacher.net.eval_from(7, &act7, Mode::Eval).unwrap();
    let mut correct = 0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * 10..(i + 1) * 10];
        let mut best = 0;
        for j in 1..10 {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == l as usize {
            correct += 1;
        }
    }
    println!("tail fed with teacher acts: {:.1}% (should equal teacher)", 100.0 * correct as f64 / 200.0);

    // teacher target stats at the cut
    let mean = act7.data().iter().sum::<f64>() / act7.len() as f64;
    let var = act7.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / act7.len() as f64;
    println!("teacher act7: mean {mean:.4} var {var:.4} dims/sample {}", act7.len() / 200);

    // run the k=1 pipeline briefly and look at the projected stats
    let mut cfg = base.clone();
    cfg.method = MethodName::SimkdPlus;
    cfg.k = Some(1);
    cfg.seed = 0;
    let (assembly, rep) = distill_simkd(&teacher, &s_spec, &data, &cfg).unwrap();
    println!("simkd+1 final: top1 {:.2} l2 {:.4}", rep.final_top1, rep.final_l2.unwrap());
    for e in rep.epochs.iter().step_by(8) {
        println!("  epoch {:>2}: train_l2 {:>9.4} top1 {:>5.1} nll {:.3}", e.epoch, e.train_loss, e.test_top1, e.test_nll);
    }
    let proj = assembly.projected(&x, Mode::Eval).unwrap();
    let pmean = proj.data().iter().sum::<f64>() / proj.len() as f64;
    let pvar = proj.data().iter().map(|v| (v - pmean) * (v - pmean)).sum::<f64>() / proj.len() as f64;
    println!("projected: mean {pmean:.4} var {pvar:.4}");
    let per_dim_err: f64 = assembly
        .teacher_target(&x)
        .unwrap()
        .sub(&proj)
        .unwrap()
        .data()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        / proj.len() as f64;
    println!("per-dim sq err {per_dim_err:.4} vs target var {var:.4}");
}
