//! Seeded synthetic degradations of clean cubes in `[0, 1]`.
//!
//! Default ranges follow the usual hyperspectral denoising benchmark
//! protocol: per-band Gaussian σ in `[10, 70]/255`, stripe offsets in
//! `[−0.25, 0.25]`, deadlines 1 to 3 columns wide and salt-and-pepper
//! impulses. Every range can be overridden. Outputs are never clipped.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Noniid,
    Stripe,
    Deadline,
    Impulse,
    Mixture,
    Gaussian,
    Blind,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 7] = [
        NoiseKind::Noniid,
        NoiseKind::Stripe,
        NoiseKind::Deadline,
        NoiseKind::Impulse,
        NoiseKind::Mixture,
        NoiseKind::Gaussian,
        NoiseKind::Blind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Noniid => "noniid",
            NoiseKind::Stripe => "stripe",
            NoiseKind::Deadline => "deadline",
            NoiseKind::Impulse => "impulse",
            NoiseKind::Mixture => "mixture",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Blind => "blind",
        }
    }

    /// Default σ in 0–255 units.
    pub fn default_sigma(self) -> Sigma {
        match self {
            NoiseKind::Gaussian => Sigma::Fixed(30.0),
            NoiseKind::Blind => Sigma::Range([30.0, 70.0]),
            _ => Sigma::Range([10.0, 70.0]),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind `{s}`")))
    }
}

/// Noise level in 0–255 intensity units: a fixed value or a uniform range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Fixed(f64),
    Range([f64; 2]),
}

impl Sigma {
    fn bounds(self) -> (f64, f64) {
        match self {
            Sigma::Fixed(v) => (v, v),
            Sigma::Range([lo, hi]) => (lo, hi),
        }
    }

    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.bounds();
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// `None` selects the kind's default.
    pub sigma: Option<Sigma>,
    /// Fraction of bands hit by structured noise.
    pub band_fraction: f64,
    /// Fraction of columns per affected band (stripes and deadlines).
    pub column_fraction: f64,
    pub impulse_prob: f64,
    pub stripe_amplitude: f64,
    pub deadline_max_width: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Mixture,
            sigma: None,
            band_fraction: 1.0 / 3.0,
            column_fraction: 0.1,
            impulse_prob: 0.3,
            stripe_amplitude: 0.25,
            deadline_max_width: 3,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            ..Self::default()
        }
    }

    pub fn with_sigma(mut self, sigma: Sigma) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn sigma(&self) -> Sigma {
        self.sigma.unwrap_or_else(|| self.kind.default_sigma())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("band_fraction", self.band_fraction)?;
        unit("column_fraction", self.column_fraction)?;
        unit("impulse_prob", self.impulse_prob)?;
        let (lo, hi) = self.sigma().bounds();
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid sigma range [{lo}, {hi}]")));
        }
        if !(self.stripe_amplitude >= 0.0 && self.stripe_amplitude.is_finite()) {
            return Err(Error::Config("stripe_amplitude must be non-negative".into()));
        }
        if self.deadline_max_width == 0 {
            return Err(Error::Config("deadline_max_width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NoiseSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Realized random parameters of one corruption.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseReport {
    /// Gaussian σ of every band, in `[0, 1]` units.
    pub band_sigmas: Vec<f64>,
    pub stripe_bands: Vec<usize>,
    pub deadline_bands: Vec<usize>,
    pub impulse_bands: Vec<usize>,
    /// `(band, column)` of every zeroed column.
    pub deadline_columns: Vec<(usize, usize)>,
    /// Number of entries replaced by an impulse.
    pub impulse_count: usize,
}

impl fmt::Display for NoiseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = self
            .band_sigmas
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(*s), b.max(*s)));
        writeln!(f, "band_sigma_min = {:.6}", lo * 255.0)?;
        writeln!(f, "band_sigma_max = {:.6}", hi * 255.0)?;
        writeln!(f, "stripe_bands = {:?}", self.stripe_bands)?;
        writeln!(f, "deadline_bands = {:?}", self.deadline_bands)?;
        writeln!(f, "deadline_columns = {}", self.deadline_columns.len())?;
        writeln!(f, "impulse_bands = {:?}", self.impulse_bands)?;
        write!(f, "impulse_count = {}", self.impulse_count)
    }
}

pub fn apply_noise(clean: &Tensor3, spec: &NoiseSpec) -> Result<Tensor3> {
    Ok(apply_noise_with_report(clean, spec)?.0)
}

fn choose_bands(rng: &mut ChaCha8Rng, n3: usize, fraction: f64) -> Vec<usize> {
    let count = ((fraction * n3 as f64).ceil() as usize).min(n3);
    let mut bands = sample(rng, n3, count).into_vec();
    bands.sort_unstable();
    bands
}

pub fn apply_noise_with_report(clean: &Tensor3, spec: &NoiseSpec) -> Result<(Tensor3, NoiseReport)> {
    spec.validate()?;
    if let Some(v) = clean.as_array().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("clean cube entry {v} outside [0, 1]")));
    }
    let (n1, n2, n3) = clean.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = clean.as_array().clone();
    let mut report = NoiseReport::default();
    let sigma = spec.sigma();

    let image_sigma = sigma.draw(&mut rng);
    for k in 0..n3 {
        let s = match spec.kind {
            NoiseKind::Gaussian | NoiseKind::Blind => image_sigma,
            _ => sigma.draw(&mut rng),
        } / 255.0;
        report.band_sigmas.push(s);
        if s > 0.0 {
            let normal = Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()))?;
            for i in 0..n1 {
                for j in 0..n2 {
                    out[[i, j, k]] += normal.sample(&mut rng);
                }
            }
        }
    }

    let all = |kind| spec.kind == kind;
    let (stripe, deadline, impulse) = match spec.kind {
        NoiseKind::Mixture => {
            let mut pick = || (0..n3).filter(|_| rng.random_bool(spec.band_fraction)).collect::<Vec<_>>();
            (pick(), pick(), pick())
        }
        _ => {
            let mut pick = |on: bool| if on { choose_bands(&mut rng, n3, spec.band_fraction) } else { vec![] };
            (
                pick(all(NoiseKind::Stripe)),
                pick(all(NoiseKind::Deadline)),
                pick(all(NoiseKind::Impulse)),
            )
        }
    };
    let column_count = ((spec.column_fraction * n2 as f64).ceil() as usize).min(n2);

    for &k in &stripe {
        for j in sample(&mut rng, n2, column_count).into_vec() {
            let offset = rng.random_range(-spec.stripe_amplitude..=spec.stripe_amplitude);
            for i in 0..n1 {
                out[[i, j, k]] += offset;
            }
        }
    }
    for &k in &impulse {
        for i in 0..n1 {
            for j in 0..n2 {
                if rng.random_bool(spec.impulse_prob) {
                    out[[i, j, k]] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                    report.impulse_count += 1;
                }
            }
        }
    }
    for &k in &deadline {
        let mut cols = Vec::new();
        for start in sample(&mut rng, n2, column_count).into_vec() {
            let width = rng.random_range(1..=spec.deadline_max_width);
            cols.extend(start..(start + width).min(n2));
        }
        cols.sort_unstable();
        cols.dedup();
        for &j in &cols {
            for i in 0..n1 {
                out[[i, j, k]] = 0.0;
            }
            report.deadline_columns.push((k, j));
        }
    }

    report.stripe_bands = stripe;
    report.deadline_bands = deadline;
    report.impulse_bands = impulse;
    Ok((Tensor3::new(out)?, report))
}
