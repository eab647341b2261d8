//! Dev tool: run the desk-scale teacher/student experiment across seeds and
//! print the method ordering, to calibrate dataset difficulty and schedule.
//!
//! Usage: cargo run --release -p kdlab --example calibrate -- [difficulty] [epochs] [per_class]

use std::time::Instant;

use kdlab::data::{gen_synthetic, AugmentConfig, SynthSpec};
use kdlab::distill::{
    distill_kd, distill_simkd, train_model, DistillConfig, MethodName, ProjectorSettings, SplitData,
};
use kdlab::layer::{LayerSpec, Shape};
use kdlab::network::NetworkSpec;

fn conv_bn_relu(in_ch: usize, out_ch: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            depthwise: false,
        },
        LayerSpec::BatchNorm { channels: out_ch },
        LayerSpec::Relu,
    ]
}

fn cnn(widths: (usize, usize, usize), classes: usize, in_ch: usize) -> NetworkSpec {
    let (w1, w2, w3) = widths;
    let mut encoder = Vec::new();
    encoder.extend(conv_bn_relu(in_ch, w1));
    encoder.extend(conv_bn_relu(w1, w2));
    encoder.push(LayerSpec::AvgPool { window: 2 });
    encoder.extend(conv_bn_relu(w2, w3));
    encoder.push(LayerSpec::AvgPool { window: 2 });
    encoder.push(LayerSpec::GlobalAvgPool);
    encoder.push(LayerSpec::Flatten);
    NetworkSpec {
        input: Shape::Map {
            c: in_ch,
            h: 8,
            w: 8,
        },
        encoder,
        block_boundaries: vec![3, 7, 13],
        feature_dim: w3,
        num_classes: classes,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let difficulty: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.45);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let per_class: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);

    let synth = SynthSpec {
        classes: 10,
        per_class,
        test_per_class: 20,
        height: 8,
        width: 8,
        channels: 3,
        difficulty,
        seed: 2024,
        max_shift: 1,
    };
    let (train, test) = gen_synthetic(&synth).unwrap();
    let data = SplitData {
        train: &train,
        test: &test,
        norm: kdlab::data::Normalization {
            means: vec![0.5; 3],
            stds: vec![0.25; 3],
        },
        augment: AugmentConfig {
            hflip_prob: 0.5,
            pad: 1,
            crop: true,
        },
    };

    let teacher_spec = cnn((16, 16, 32), 10, 3);
    let student_spec = cnn((4, 4, 8), 10, 3);
    println!(
        "teacher params {}, student params {}",
        teacher_spec.param_count(),
        student_spec.param_count()
    );

    let milestones = vec![epochs / 2, epochs * 3 / 4, epochs * 7 / 8];
    let base = DistillConfig {
        method: MethodName::Teacher,
        alpha: None,
        k: None,
        variant: None,
        temperature: 4.0,
        epochs,
        batch_size: 64,
        lr: 0.05,
        lr_milestones: milestones,
        momentum: 0.9,
        weight_decay: 5e-4,
        seed: 100,
        projector: ProjectorSettings::default(),
    };

    let t0 = Instant::now();
    let (teacher, t_report) = train_model(&teacher_spec, &data, &base).unwrap();
    println!(
        "teacher: top1 {:.2} nll {:.3}  [{:.1?}]",
        t_report.final_top1,
        t_report.final_nll,
        t0.elapsed()
    );

    let seeds = [0u64, 1, 2, 3];
    let mut rows: Vec<(String, Vec<f64>)> = vec![
        ("student".into(), vec![]),
        ("kd".into(), vec![]),
        ("simkd".into(), vec![]),
    ];
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;

        cfg.method = MethodName::Baseline;
        let t = Instant::now();
        let (_, rep) = train_model(&student_spec, &data, &cfg).unwrap();
        rows[0].1.push(rep.final_top1);
        let t_base = t.elapsed();

        cfg.method = MethodName::Kd;
        let t = Instant::now();
        let (_, rep) = distill_kd(&teacher, &student_spec, &data, &cfg).unwrap();
        rows[1].1.push(rep.final_top1);
        let t_kd = t.elapsed();

        cfg.method = MethodName::Simkd;
        let t = Instant::now();
        let (_, rep) = distill_simkd(&teacher, &student_spec, &data, &cfg).unwrap();
        rows[2].1.push(rep.final_top1);
        let t_simkd = t.elapsed();
        println!(
            "seed {seed}: student {:.2} kd {:.2} simkd {:.2} (l2 {:.4})  [{:.1?}/{:.1?}/{:.1?}]",
            rows[0].1.last().unwrap(),
            rows[1].1.last().unwrap(),
            rows[2].1.last().unwrap(),
            rep.final_l2.unwrap_or(f64::NAN),
            t_base,
            t_kd,
            t_simkd
        );
    }
    println!("\ntotal {:.1?}", t0.elapsed());
    for (name, vals) in rows {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
        println!("{name:>8}: {mean:.2} ± {:.2}  {vals:?}", var.sqrt());
    }
}
