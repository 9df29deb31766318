//! Scratch harness for sizing the end-to-end synthetic run: trains on the
//! coupled-oscillator dataset and reports held-out conditioning MSE per
//! coordinate plus the prior-component switch points.

use dyad::dataio::{synth_interactions, unstack_first_frames, InteractionDataset, SynthConfig};
use dyad::numkit::Matrix;
use dyad::pipeline::{condition, train, TrainConfig};

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(50);
    let kl_scale: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3);
    let lr: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-4);
    let prior_reg: f64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-1);
    let sigma = 0.01;
    let cfg = SynthConfig {
        classes: 2,
        modes: 3,
        demos: 20,
        len: 120,
        sigma,
        seed: 1,
    };
    let (demos, truth) = synth_interactions(&cfg).unwrap();

    // hold out the last 4 demos of each class
    let mut train_demos = Vec::new();
    let mut held = Vec::new();
    for (i, d) in demos.iter().enumerate() {
        if i % 20 >= 16 {
            held.push(d.clone());
        } else {
            train_demos.push(d.clone());
        }
    }
    let window = 5;
    let dataset = InteractionDataset::from_raw(&train_demos, window).unwrap();
    let tc = TrainConfig {
        window,
        epochs,
        seed: 42,
        kl_scale,
        learning_rate: lr,
        prior_reg,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (model, log) = train(&dataset, &tc).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    for r in &log.records {
        if r.epoch % 20 == 0 || r.epoch + 1 == epochs {
            println!(
                "epoch {} class {}: recon {:.3e} kl {:.3}",
                r.epoch, r.class, r.recon, r.kl
            );
        }
    }
    println!("train: {train_secs:.1}s ({:.2} s/epoch)", train_secs / epochs as f64);

    // posterior scale probe: average factor diagonal on one training demo
    {
        let w = dyad::dataio::window_stack(&train_demos[0], window).unwrap();
        let posts = model.vae.agent1.encode(&w.agent1).unwrap();
        let mut diag = 0.0;
        let mut latspread = vec![0.0f64; model.config.latent_dim];
        let means = model.vae.agent1.encode_means(&w.agent1).unwrap();
        let mut mu = vec![0.0f64; model.config.latent_dim];
        for t in 0..means.rows() { for j in 0..mu.len() { mu[j] += means[(t, j)] / means.rows() as f64; } }
        for t in 0..means.rows() { for j in 0..mu.len() { let d = means[(t, j)] - mu[j]; latspread[j] += d * d / means.rows() as f64; } }
        for p in &posts {
            for i in 0..p.dim() { diag += p.chol()[(i, i)] / (p.dim() * posts.len()) as f64; }
        }
        let spread: f64 = latspread.iter().sum::<f64>() / latspread.len() as f64;
        println!("posterior sigma ~{diag:.4}, latent mean-spread std ~{:.4}", spread.sqrt());
    }

    // held-out conditioning MSE per coordinate
    for class_idx in 0..2 {
        let class = format!("class{class_idx}");
        let mut err_sum = vec![0.0f64; 2];
        let mut n = 0usize;
        for demo in held.iter().filter(|d| d.class_label == class) {
            let w = dyad::dataio::window_stack(demo, window).unwrap();
            let pred = condition(&model, &class, &w.agent1).unwrap();
            let pred_frames = unstack_first_frames(&pred, window);
            let truth_frames: Matrix = unstack_first_frames(&w.agent2, window);
            for t in 0..pred_frames.rows() {
                for j in 0..2 {
                    let e = pred_frames[(t, j)] - truth_frames[(t, j)];
                    err_sum[j] += e * e;
                }
                n += 1;
            }
        }
        let mse: Vec<f64> = err_sum.iter().map(|s| s / n as f64).collect();
        println!(
            "{class}: held-out per-coord MSE {:.3e} {:.3e} (budget {:.1e})",
            mse[0],
            mse[1],
            4.0 * sigma * sigma
        );

        // prior schedule switches vs planted boundaries
        let schedule = model.hsmms[&class].prior_schedule(116).unwrap();
        let mut switches = Vec::new();
        for t in 1..schedule.len() {
            if schedule[t] != schedule[t - 1] {
                switches.push(t);
            }
        }
        println!("{class}: boundaries {:?} switches {switches:?}", truth.boundaries(class_idx));
    }
}
