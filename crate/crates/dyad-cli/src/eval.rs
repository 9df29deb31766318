//! Per-timestep MSE evaluation of conditioned predictions against ground
//! truth, with plot-ready CSV output.
//!
//! The headline numbers are computed on the unstacked per-frame trajectory
//! (the first frame of each predicted window) in raw input units; the
//! windowed-vector MSE is reported alongside. Per-coordinate MSes are
//! always emitted; grouping coordinates into joints is opt-in via
//! `coords_per_joint`.

use std::collections::BTreeMap;

use dyad::dataio::{unstack_first_frames, window_stack, RawDemo};
use dyad::numkit::Matrix;
use dyad::pipeline::{condition, TrainedModel};
use dyad::{Error, Result};

/// Aggregated prediction error for one class.
#[derive(Debug, Clone)]
pub struct ClassReport {
    pub class: String,
    pub demos: usize,
    /// Evaluated (demo, timestep) pairs.
    pub frames: usize,
    /// Mean/std over all (demo, timestep) of the per-frame MSE
    /// (averaged over coordinates), raw input units squared.
    pub mse_mean: f64,
    pub mse_std: f64,
    /// Same statistic on full predicted window vectors.
    pub window_mse_mean: f64,
    pub window_mse_std: f64,
    /// Per-coordinate MSE over all demos and timesteps.
    pub per_coord: Vec<f64>,
    /// Per-joint MSE when a joint width was supplied.
    pub per_joint: Option<Vec<f64>>,
    /// Per-timestep MSE averaged over demos (and coordinates).
    pub curve: Vec<f64>,
}

/// Frame-level squared-error statistics between prediction/truth pairs.
///
/// Each pair must have equal shape; rows are timesteps. Returns
/// `(mean, std, curve, per_coord, frames)`.
pub fn mse_stats(pairs: &[(Matrix, Matrix)]) -> (f64, f64, Vec<f64>, Vec<f64>, usize) {
    assert!(!pairs.is_empty(), "no prediction pairs");
    let d = pairs[0].0.cols();
    let mut per_step: Vec<f64> = Vec::new();
    let mut curve_sum: Vec<f64> = Vec::new();
    let mut curve_n: Vec<usize> = Vec::new();
    let mut coord_sum = vec![0.0; d];
    let mut coord_n = 0usize;
    for (pred, truth) in pairs {
        assert_eq!(pred.rows(), truth.rows());
        assert_eq!(pred.cols(), d);
        assert_eq!(truth.cols(), d);
        for t in 0..pred.rows() {
            let mut frame = 0.0;
            for j in 0..d {
                let e = pred[(t, j)] - truth[(t, j)];
                frame += e * e;
                coord_sum[j] += e * e;
            }
            coord_n += 1;
            frame /= d as f64;
            per_step.push(frame);
            if t >= curve_sum.len() {
                curve_sum.push(0.0);
                curve_n.push(0);
            }
            curve_sum[t] += frame;
            curve_n[t] += 1;
        }
    }
    let n = per_step.len() as f64;
    let mean = per_step.iter().sum::<f64>() / n;
    let var = per_step.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let curve = curve_sum
        .iter()
        .zip(&curve_n)
        .map(|(s, c)| s / *c as f64)
        .collect();
    let per_coord = coord_sum.iter().map(|s| s / coord_n as f64).collect();
    (mean, var.sqrt(), curve, per_coord, per_step.len())
}

/// Conditions the model on every demo's agent-1 stream and scores the
/// predicted agent-2 trajectory against ground truth.
pub fn eval_model(
    model: &TrainedModel,
    demos: &[RawDemo],
    coords_per_joint: Option<usize>,
) -> Result<Vec<ClassReport>> {
    let window = model.config.window;
    let known = model.classes();
    let mut by_class: BTreeMap<String, Vec<&RawDemo>> = BTreeMap::new();
    for demo in demos {
        if !known.contains(&demo.class_label) {
            return Err(Error::UnknownClass {
                class: demo.class_label.clone(),
                known,
            });
        }
        by_class.entry(demo.class_label.clone()).or_default().push(demo);
    }

    let mut reports = Vec::new();
    for (class, class_demos) in &by_class {
        let mut frame_pairs = Vec::new();
        let mut window_pairs = Vec::new();
        for demo in class_demos {
            let windowed = window_stack(demo, window)?;
            let pred_windows = condition(model, class, &windowed.agent1)?;
            let truth_windows = windowed.agent2;
            let pred_frames = unstack_first_frames(&pred_windows, window);
            let truth_frames = unstack_first_frames(&truth_windows, window);
            frame_pairs.push((pred_frames, truth_frames));
            window_pairs.push((pred_windows, truth_windows));
        }
        let (mse_mean, mse_std, curve, per_coord, frames) = mse_stats(&frame_pairs);
        let (window_mse_mean, window_mse_std, _, _, _) = mse_stats(&window_pairs);
        let per_joint = coords_per_joint.map(|width| {
            assert!(width >= 1, "joint width must be >= 1");
            per_coord
                .chunks(width)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect()
        });
        reports.push(ClassReport {
            class: class.clone(),
            demos: class_demos.len(),
            frames,
            mse_mean,
            mse_std,
            window_mse_mean,
            window_mse_std,
            per_coord,
            per_joint,
            curve,
        });
    }
    Ok(reports)
}

pub fn summary_csv(reports: &[ClassReport]) -> String {
    let mut out = String::from(
        "class,demos,frames,mse_mean,mse_std,window_mse_mean,window_mse_std,units\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},raw_units^2\n",
            r.class, r.demos, r.frames, r.mse_mean, r.mse_std, r.window_mse_mean, r.window_mse_std
        ));
    }
    out
}

pub fn curve_csv(reports: &[ClassReport]) -> String {
    let mut out = String::from("class,t,mse,units\n");
    for r in reports {
        for (t, v) in r.curve.iter().enumerate() {
            out.push_str(&format!("{},{},{},raw_units^2\n", r.class, t, v));
        }
    }
    out
}

pub fn coords_csv(reports: &[ClassReport]) -> String {
    let mut out = String::from("class,coord,mse,units\n");
    for r in reports {
        for (j, v) in r.per_coord.iter().enumerate() {
            out.push_str(&format!("{},{},{},raw_units^2\n", r.class, j, v));
        }
    }
    out
}

pub fn joints_csv(reports: &[ClassReport]) -> Option<String> {
    reports.first()?.per_joint.as_ref()?;
    let mut out = String::from("class,joint,mse,units\n");
    for r in reports {
        if let Some(pj) = &r.per_joint {
            for (j, v) in pj.iter().enumerate() {
                out.push_str(&format!("{},{},{},raw_units^2\n", r.class, j, v));
            }
        }
    }
    Some(out)
}
