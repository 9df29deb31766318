//! Dataset schema, ingestion, preprocessing, and a synthetic two-agent
//! interaction generator.
//!
//! # Dataset text format
//!
//! UTF-8, whitespace-separated numerals, `#` starts a comment that runs to
//! the end of the line, blank lines are ignored. Each demonstration is one
//! header record followed by its frames:
//!
//! ```text
//! demo <class> <T> <d1> <d2> <frame_rate>
//! <d1+d2 numbers>        # frame 0: agent-1 values then agent-2 values
//! ...                    # T frames total
//! ```
//!
//! Values are parsed as `f64`; non-finite values are rejected with the
//! offending record named. Floats are written with Rust's shortest
//! round-trip formatting, so a write/load cycle is value-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkit::{Matrix, RngState};
use crate::{Error, Result};

/// One two-agent demonstration, time-aligned (equal length across agents).
#[derive(Debug, Clone)]
pub struct RawDemo {
    pub class_label: String,
    /// `T x d1`.
    pub agent1: Matrix,
    /// `T x d2`.
    pub agent2: Matrix,
    pub frame_rate: f64,
}

impl RawDemo {
    pub fn len(&self) -> usize {
        self.agent1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A demonstration after window stacking: row `t` is the flattening of raw
/// frames `t..t+w-1` in time-major order, stride 1.
#[derive(Debug, Clone)]
pub struct WindowedDemo {
    pub class_label: String,
    /// `(T-w+1) x (w*d1)`.
    pub agent1: Matrix,
    /// `(T-w+1) x (w*d2)`.
    pub agent2: Matrix,
    pub window: usize,
}

impl WindowedDemo {
    pub fn len(&self) -> usize {
        self.agent1.rows()
    }
}

/// Labeled, windowed training set.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub demos: Vec<WindowedDemo>,
    pub window: usize,
}

impl InteractionDataset {
    pub fn from_raw(demos: &[RawDemo], window: usize) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let windowed = demos
            .iter()
            .map(|d| window_stack(d, window))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            demos: windowed,
            window,
        })
    }

    /// Sorted unique class labels.
    pub fn classes(&self) -> Vec<String> {
        let mut cs: Vec<String> = self
            .demos
            .iter()
            .map(|d| d.class_label.clone())
            .collect();
        cs.sort();
        cs.dedup();
        cs
    }

    pub fn class_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for d in &self.demos {
            *h.entry(d.class_label.clone()).or_insert(0) += 1;
        }
        h
    }
}

/// Histogram of class labels for raw demos.
pub fn class_histogram(demos: &[RawDemo]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for d in demos {
        *h.entry(d.class_label.clone()).or_insert(0) += 1;
    }
    h
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<RawDemo>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn parse_dataset(text: &str, path: &str) -> Result<Vec<RawDemo>> {
    let err = |line: usize, msg: String| Error::ParseError {
        path: path.to_string(),
        line,
        msg,
    };
    // strip comments, keep (line_no, tokens)
    let mut records: Vec<(usize, Vec<&str>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if !toks.is_empty() {
            records.push((idx + 1, toks));
        }
    }
    let mut demos = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let (line_no, toks) = &records[i];
        if toks[0] != "demo" {
            return Err(err(*line_no, format!("expected 'demo' header, got {:?}", toks[0])));
        }
        if toks.len() != 6 {
            return Err(err(
                *line_no,
                "demo header needs: demo <class> <T> <d1> <d2> <frame_rate>".into(),
            ));
        }
        let class = toks[1].to_string();
        let t: usize = toks[2]
            .parse()
            .map_err(|_| err(*line_no, format!("bad T {:?}", toks[2])))?;
        let d1: usize = toks[3]
            .parse()
            .map_err(|_| err(*line_no, format!("bad d1 {:?}", toks[3])))?;
        let d2: usize = toks[4]
            .parse()
            .map_err(|_| err(*line_no, format!("bad d2 {:?}", toks[4])))?;
        let frame_rate: f64 = toks[5]
            .parse()
            .map_err(|_| err(*line_no, format!("bad frame_rate {:?}", toks[5])))?;
        if t == 0 || d1 == 0 || d2 == 0 {
            return Err(err(*line_no, "T, d1 and d2 must be positive".into()));
        }
        i += 1;
        let mut a1 = Vec::with_capacity(t * d1);
        let mut a2 = Vec::with_capacity(t * d2);
        for frame in 0..t {
            if i >= records.len() {
                return Err(err(
                    *line_no,
                    format!("demo {class:?} truncated: expected {t} frames, got {frame}"),
                ));
            }
            let (fline, ftoks) = &records[i];
            if ftoks.len() != d1 + d2 {
                return Err(err(
                    *fline,
                    format!("expected {} values per frame, got {}", d1 + d2, ftoks.len()),
                ));
            }
            for (k, tok) in ftoks.iter().enumerate() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| err(*fline, format!("bad number {tok:?}")))?;
                if !v.is_finite() {
                    return Err(err(
                        *fline,
                        format!("non-finite value {tok:?} in demo {class:?} frame {frame}"),
                    ));
                }
                if k < d1 {
                    a1.push(v);
                } else {
                    a2.push(v);
                }
            }
            i += 1;
        }
        demos.push(RawDemo {
            class_label: class,
            agent1: Matrix::new(t, d1, a1),
            agent2: Matrix::new(t, d2, a2),
            frame_rate,
        });
    }
    if demos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(demos)
}

pub fn write_dataset(path: impl AsRef<Path>, demos: &[RawDemo]) -> Result<()> {
    std::fs::write(path, format_dataset(demos))?;
    Ok(())
}

pub fn format_dataset(demos: &[RawDemo]) -> String {
    let mut out = String::new();
    for d in demos {
        let (t, d1, d2) = (d.len(), d.agent1.cols(), d.agent2.cols());
        writeln!(out, "demo {} {} {} {} {}", d.class_label, t, d1, d2, d.frame_rate).unwrap();
        for r in 0..t {
            let mut first = true;
            for v in d.agent1.row(r).iter().chain(d.agent2.row(r)) {
                if !first {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
                first = false;
            }
            out.push('\n');
        }
    }
    out
}

/// Stacks `w` consecutive frames into each row, stride 1. `w = 1` is the
/// identity stacking.
pub fn window_stack(demo: &RawDemo, w: usize) -> Result<WindowedDemo> {
    let t = demo.len();
    if w == 0 || w > t {
        return Err(Error::WindowTooLong { window: w, len: t });
    }
    let stack = |m: &Matrix| {
        let n = t - w + 1;
        let mut data = Vec::with_capacity(n * w * m.cols());
        for start in 0..n {
            for f in start..start + w {
                data.extend_from_slice(m.row(f));
            }
        }
        Matrix::new(n, w * m.cols(), data)
    };
    Ok(WindowedDemo {
        class_label: demo.class_label.clone(),
        agent1: stack(&demo.agent1),
        agent2: stack(&demo.agent2),
        window: w,
    })
}

/// First frame of every window: row `t` of the result is frame `t`'s raw
/// values, length `T - w + 1`.
pub fn unstack_first_frames(windows: &Matrix, w: usize) -> Matrix {
    assert_eq!(windows.cols() % w, 0, "window width not divisible");
    let d = windows.cols() / w;
    Matrix::from_fn(windows.rows(), d, |i, j| windows[(i, j)])
}

/// Full inverse of [`window_stack`]: first frame of each window plus the
/// tail frames of the last window.
pub fn unstack_full(windows: &Matrix, w: usize) -> Matrix {
    assert_eq!(windows.cols() % w, 0, "window width not divisible");
    let d = windows.cols() / w;
    let n = windows.rows();
    let t = n + w - 1;
    Matrix::from_fn(t, d, |i, j| {
        if i < n {
            windows[(i, j)]
        } else {
            // tail of the last window
            windows[(n - 1, (i - (n - 1)) * d + j)]
        }
    })
}

/// Resamples the longer sequence to the shorter length by linear
/// interpolation at uniform fractional indices. Endpoints are preserved
/// exactly; equal-length inputs are returned unchanged.
pub fn align_and_downsample(a: &Matrix, b: &Matrix) -> (Matrix, Matrix) {
    assert!(a.rows() > 0 && b.rows() > 0, "align: empty sequence");
    if a.rows() == b.rows() {
        return (a.clone(), b.clone());
    }
    if a.rows() > b.rows() {
        (resample(a, b.rows()), b.clone())
    } else {
        (a.clone(), resample(b, a.rows()))
    }
}

fn resample(m: &Matrix, target: usize) -> Matrix {
    let t = m.rows();
    if target == t {
        return m.clone();
    }
    if target == 1 {
        return Matrix::from_fn(1, m.cols(), |_, j| m[(0, j)]);
    }
    let scale = (t - 1) as f64 / (target - 1) as f64;
    Matrix::from_fn(target, m.cols(), |i, j| {
        if i == target - 1 {
            // keep the final sample exact regardless of rounding
            return m[(t - 1, j)];
        }
        let pos = i as f64 * scale;
        let lo = pos.floor() as usize;
        if lo + 1 >= t {
            m[(t - 1, j)]
        } else {
            let frac = pos - lo as f64;
            m[(lo, j)] * (1.0 - frac) + m[(lo + 1, j)] * frac
        }
    })
}

/// Centered moving average per column with a shrinking window at the
/// boundaries. `window` must be odd; length is preserved.
pub fn moving_average(x: &Matrix, window: usize) -> Matrix {
    assert!(window >= 1 && window % 2 == 1, "window must be odd and >= 1");
    let r = window / 2;
    let t = x.rows();
    Matrix::from_fn(t, x.cols(), |i, j| {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(t - 1);
        let mut s = 0.0;
        for k in lo..=hi {
            s += x[(k, j)];
        }
        s / (hi - lo + 1) as f64
    })
}

/// Parameters of the synthetic generator. Field names double as the keys of
/// the TOML config file accepted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of interaction classes.
    pub classes: usize,
    /// Phases per class.
    pub modes: usize,
    /// Demonstrations per class.
    pub demos: usize,
    /// Frames per demonstration.
    #[serde(rename = "T")]
    pub len: usize,
    /// Observation noise standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.modes == 0 || self.demos == 0 || self.len == 0 {
            return Err(Error::InvalidConfig(
                "classes, modes, demos and T must all be >= 1".into(),
            ));
        }
        if self.len < 2 * self.modes {
            return Err(Error::InvalidConfig(
                "T too short for the requested number of modes".into(),
            ));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidConfig("sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One phase of a synthetic class: agent 1 sweeps an oscillation at
/// `omega` rad/frame and agent 2 is the fixed linear image `map * x1`.
#[derive(Debug, Clone)]
pub struct PhaseSpec {
    /// First frame of the phase (inclusive).
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
    pub omega: f64,
    /// Row-major 2x2 coupling applied to agent 1.
    pub map: [f64; 4],
}

/// Ground-truth generator parameters, returned alongside the dataset so
/// tests can evaluate against the noise-free coupling.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Phase layout per class, indexed like the sorted class labels
    /// (`class0`, `class1`, ...).
    pub classes: Vec<Vec<PhaseSpec>>,
    pub sigma: f64,
    pub amplitude: f64,
}

impl SynthTruth {
    /// Interior phase boundaries of a class (frame indices where the mode
    /// switches).
    pub fn boundaries(&self, class: usize) -> Vec<usize> {
        self.classes[class]
            .iter()
            .skip(1)
            .map(|p| p.start)
            .collect()
    }

    /// The documented coupling: agent 2's noise-free frame given agent 1's
    /// noise-free frame at time `t`.
    pub fn coupling(&self, class: usize, t: usize, x1: &[f64]) -> Vec<f64> {
        let phase = self.classes[class]
            .iter()
            .find(|p| t >= p.start && t < p.end)
            .expect("t out of range");
        let m = &phase.map;
        vec![
            m[0] * x1[0] + m[1] * x1[1],
            m[2] * x1[0] + m[3] * x1[1],
        ]
    }
}

/// Base oscillation amplitude of the generator.
pub const SYNTH_AMPLITUDE: f64 = 0.4;

/// Generates a labeled two-agent dataset of piecewise coupled planar
/// oscillators. Within each phase, agent 2 is exactly `map * agent1`
/// (before noise); the oscillation envelope vanishes at phase boundaries so
/// trajectories stay continuous across coupling switches. Deterministic per
/// seed.
pub fn synth_interactions(cfg: &SynthConfig) -> Result<(Vec<RawDemo>, SynthTruth)> {
    cfg.validate()?;
    let mut class_specs = Vec::with_capacity(cfg.classes);
    let mut rng_spec = RngState::new(cfg.seed).derive(0xC1A55);
    for _ in 0..cfg.classes {
        let mut phases = Vec::with_capacity(cfg.modes);
        for p in 0..cfg.modes {
            let start = p * cfg.len / cfg.modes;
            let end = (p + 1) * cfg.len / cfg.modes;
            let omega = rng_spec.uniform(0.02, 0.06) * if p % 2 == 0 { 1.0 } else { -1.0 };
            let scale = rng_spec.uniform(0.7, 1.3);
            let angle = rng_spec.uniform(-2.5, 2.5);
            let (c, s) = (angle.cos(), angle.sin());
            phases.push(PhaseSpec {
                start,
                end,
                omega,
                map: [scale * c, -scale * s, scale * s, scale * c],
            });
        }
        class_specs.push(phases);
    }
    let truth = SynthTruth {
        classes: class_specs,
        sigma: cfg.sigma,
        amplitude: SYNTH_AMPLITUDE,
    };

    let mut demos = Vec::with_capacity(cfg.classes * cfg.demos);
    let mut rng = RngState::new(cfg.seed).derive(0xDA7A);
    for (ci, phases) in truth.classes.iter().enumerate() {
        for _ in 0..cfg.demos {
            let phi0 = rng.uniform(-0.3, 0.3);
            let amp = SYNTH_AMPLITUDE * rng.uniform(0.9, 1.1);
            let mut a1 = Vec::with_capacity(cfg.len * 2);
            let mut a2 = Vec::with_capacity(cfg.len * 2);
            let mut theta = phi0;
            for phase in phases {
                let span = (phase.end - phase.start) as f64;
                for t in phase.start..phase.end {
                    let u = (t - phase.start) as f64 / span;
                    let env = (std::f64::consts::PI * u).sin().powi(2);
                    let x1 = [amp * env * theta.cos(), amp * env * theta.sin()];
                    let m = &phase.map;
                    let x2 = [
                        m[0] * x1[0] + m[1] * x1[1],
                        m[2] * x1[0] + m[3] * x1[1],
                    ];
                    a1.push(x1[0] + cfg.sigma * rng.normal());
                    a1.push(x1[1] + cfg.sigma * rng.normal());
                    a2.push(x2[0] + cfg.sigma * rng.normal());
                    a2.push(x2[1] + cfg.sigma * rng.normal());
                    theta += phase.omega;
                }
            }
            demos.push(RawDemo {
                class_label: format!("class{ci}"),
                agent1: Matrix::new(cfg.len, 2, a1),
                agent2: Matrix::new(cfg.len, 2, a2),
                frame_rate: 40.0,
            });
        }
    }
    Ok((demos, truth))
}

/// Subtracts a reference column group from every frame of both agents
/// (origin normalization for position-like data). `reference` names the
/// starting column of a `dims`-wide group in each agent's frame.
pub fn normalize_origin(demo: &RawDemo, reference: usize, dims: usize) -> RawDemo {
    let shift = |m: &Matrix| {
        assert!(reference + dims <= m.cols(), "reference columns out of range");
        Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            m[(i, j)] - m[(i, reference + (j % dims))]
        })
    };
    RawDemo {
        class_label: demo.class_label.clone(),
        agent1: shift(&demo.agent1),
        agent2: shift(&demo.agent2),
        frame_rate: demo.frame_rate,
    }
}
