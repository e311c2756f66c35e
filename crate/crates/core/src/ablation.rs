//! Desk-scale benchmark: stage-count sweep and module toggles on synthetic
//! phantoms with mixed noise.
//!
//! Every variant starts from the same initialization seed and sees the same
//! sample order, so differences between rows come from the architecture.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{quality, Quality};
use crate::noise::{apply_noise, NoiseKind, NoiseSpec};
use crate::phantom::smooth_phantom;
use crate::tensor::Tensor3;
use crate::unfolding::{default_rank, train, TrainConfig, TrainingSample, UnfoldingConfig, UnfoldingNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seed: u64,
    pub noise: NoiseKind,
    /// Number of training phantoms; each yields four patches.
    pub train_cubes: usize,
    pub eval_cubes: usize,
    /// Spatial size of training patches.
    pub patch: usize,
    /// Spatial size of evaluation cubes.
    pub eval_size: usize,
    pub bands: usize,
    pub materials: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub base_channels: usize,
    pub topk_ratio_init: f64,
    /// `None` means `⌈patch/3⌉`.
    pub rank: Option<usize>,
    /// Stage counts of the sweep.
    pub stage_sweep: Vec<usize>,
    /// Stage count of the module comparison.
    pub stages: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise: NoiseKind::Mixture,
            train_cubes: 8,
            eval_cubes: 4,
            patch: 8,
            eval_size: 16,
            bands: 8,
            materials: 3,
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            base_channels: 8,
            topk_ratio_init: 0.5,
            rank: None,
            stage_sweep: vec![2, 3, 4, 5, 6],
            stages: 4,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_cubes == 0 || self.eval_cubes == 0 {
            return Err(Error::Config("need at least one training and one evaluation cube".into()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(2) || !self.eval_size.is_multiple_of(2) {
            return Err(Error::Config("patch and eval_size must be positive and even".into()));
        }
        if self.eval_size < crate::metrics::SSIM_WINDOW {
            return Err(Error::Config(format!(
                "eval_size must be at least {}",
                crate::metrics::SSIM_WINDOW
            )));
        }
        if self.stage_sweep.is_empty() || self.stage_sweep.contains(&0) || self.stages == 0 {
            return Err(Error::Config("stage counts must be positive".into()));
        }
        if self.bands == 0 || self.steps == 0 {
            return Err(Error::Config("bands and steps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or_else(|| default_rank(self.patch, self.patch))
    }

    fn model(&self, stages: usize, use_tsvd: bool, use_topk: bool) -> UnfoldingConfig {
        UnfoldingConfig {
            stages,
            rank: Some(self.rank()),
            base_channels: self.base_channels,
            levels: 2,
            topk_ratio_init: self.topk_ratio_init,
            use_tsvd,
            use_topk,
            init_seed: self.seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: usize::MAX,
            batch_size: self.batch_size,
            lr: self.lr,
            max_steps: Some(self.steps),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Training patches and evaluation cubes of one benchmark run.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub train: Vec<TrainingSample>,
    pub eval: Vec<TrainingSample>,
}

fn crop(t: &Tensor3, i0: usize, j0: usize, size: usize) -> Tensor3 {
    let (_, _, n3) = t.dims();
    Tensor3::from_fn(size, size, n3, |(i, j, k)| t.get(i0 + i, j0 + j, k)).expect("finite")
}

/// Builds the phantom fixture for `cfg`. Training phantoms are twice the
/// patch size and cut into four patches.
pub fn build_fixture(cfg: &AblationConfig) -> Result<Fixture> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_seed = cfg.seed.wrapping_mul(1_000_003);
    let mut degrade = |clean: Tensor3| -> Result<TrainingSample> {
        noise_seed = noise_seed.wrapping_add(1);
        let noisy = apply_noise(&clean, &NoiseSpec::new(cfg.noise, noise_seed))?;
        TrainingSample::new(noisy, clean)
    };
    let mut train_set = Vec::new();
    for _ in 0..cfg.train_cubes {
        let big = smooth_phantom(2 * cfg.patch, 2 * cfg.patch, cfg.bands, cfg.materials, &mut rng);
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            train_set.push(degrade(crop(&big, a * cfg.patch, b * cfg.patch, cfg.patch))?);
        }
    }
    let mut eval = Vec::new();
    for _ in 0..cfg.eval_cubes {
        let clean = smooth_phantom(cfg.eval_size, cfg.eval_size, cfg.bands, cfg.materials, &mut rng);
        eval.push(degrade(clean)?);
    }
    Ok(Fixture { train: train_set, eval })
}

fn mean_quality(net: &UnfoldingNet, eval: &[TrainingSample]) -> Result<Quality> {
    let mut acc = Quality {
        psnr: 0.0,
        ssim: 0.0,
        sam: 0.0,
    };
    for s in eval {
        let q = quality(&s.clean, &net.denoise(&s.noisy)?)?;
        acc.psnr += q.psnr;
        acc.ssim += q.ssim;
        acc.sam += q.sam;
    }
    let n = eval.len() as f64;
    Ok(Quality {
        psnr: acc.psnr / n,
        ssim: acc.ssim / n,
        sam: acc.sam / n,
    })
}

/// Mean quality of the noisy inputs themselves.
pub fn input_quality(fixture: &Fixture) -> Result<Quality> {
    let mut acc = (0.0, 0.0, 0.0);
    for s in &fixture.eval {
        let q = quality(&s.clean, &s.noisy)?;
        acc = (acc.0 + q.psnr, acc.1 + q.ssim, acc.2 + q.sam);
    }
    let n = fixture.eval.len() as f64;
    Ok(Quality {
        psnr: acc.0 / n,
        ssim: acc.1 / n,
        sam: acc.2 / n,
    })
}

/// Trains one variant on the fixture and evaluates its final-stage output.
pub fn run_variant(
    cfg: &AblationConfig,
    fixture: &Fixture,
    stages: usize,
    use_tsvd: bool,
    use_topk: bool,
) -> Result<Quality> {
    let mut net = UnfoldingNet::new(cfg.model(stages, use_tsvd, use_topk))?;
    train(&mut net, &fixture.train, &[], &cfg.train_config())?;
    mean_quality(&net, &fixture.eval)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRow {
    pub stages: usize,
    pub quality: Quality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Neither module: the plain residual sparse-network denoiser.
    None,
    Tsvd,
    TopK,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::Tsvd, Variant::TopK, Variant::Both];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Tsvd => "tsvd",
            Variant::TopK => "topk",
            Variant::Both => "both",
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::None => (false, false),
            Variant::Tsvd => (true, false),
            Variant::TopK => (false, true),
            Variant::Both => (true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleRow {
    pub variant: Variant,
    pub quality: Quality,
}

pub fn stage_sweep(cfg: &AblationConfig, fixture: &Fixture) -> Result<Vec<StageRow>> {
    cfg.stage_sweep
        .iter()
        .map(|&k| {
            Ok(StageRow {
                stages: k,
                quality: run_variant(cfg, fixture, k, true, true)?,
            })
        })
        .collect()
}

pub fn module_toggles(cfg: &AblationConfig, fixture: &Fixture, variants: &[Variant]) -> Result<Vec<ModuleRow>> {
    variants
        .iter()
        .map(|&v| {
            let (tsvd, topk) = v.flags();
            Ok(ModuleRow {
                variant: v,
                quality: run_variant(cfg, fixture, cfg.stages, tsvd, topk)?,
            })
        })
        .collect()
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fmt_err)?;
    for r in rows {
        w.write_record(&r).map_err(fmt_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn quality_fields(q: &Quality) -> [String; 3] {
    [format!("{:.6}", q.psnr), format!("{:.6}", q.ssim), format!("{:.6}", q.sam)]
}

pub fn stages_csv(rows: &[StageRow]) -> Result<String> {
    let body = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.stages.to_string()];
            v.extend(quality_fields(&r.quality));
            v
        })
        .collect();
    csv_string(&["stages", "psnr", "ssim", "sam"], body)
}

pub fn modules_csv(rows: &[ModuleRow]) -> Result<String> {
    let body = rows
        .iter()
        .map(|r| {
            let (tsvd, topk) = r.variant.flags();
            let mut v = vec![r.variant.name().to_string(), tsvd.to_string(), topk.to_string()];
            v.extend(quality_fields(&r.quality));
            v
        })
        .collect();
    csv_string(&["variant", "tsvd", "topk", "psnr", "ssim", "sam"], body)
}

/// Standalone SVG line plot of PSNR against the number of stages.
pub fn stage_plot_svg(rows: &[StageRow]) -> String {
    let (w, h, margin) = (480.0, 320.0, 56.0);
    let xs: Vec<f64> = rows.iter().map(|r| r.stages as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.quality.psnr).collect();
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let py = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = margin,
        t = margin / 2.0,
        b = h - margin,
        r = w - margin / 2.0
    );
    for r in rows {
        let x = px(r.stages as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            h - margin + 18.0,
            r.stages
        );
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#,
            margin - 6.0,
            py(y) + 4.0
        );
    }
    let points: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.1},{:.1}", px(r.stages as f64), py(r.quality.psnr)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    for p in &points {
        let (x, y) = p.split_once(',').expect("pair");
        let _ = writeln!(s, r##"<circle cx="{x}" cy="{y}" r="3" fill="#1f77b4"/>"##);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">stages</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">PSNR (dB)</text>"#,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(p: f64) -> Quality {
        Quality {
            psnr: p,
            ssim: 0.5,
            sam: 0.1,
        }
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            StageRow { stages: 2, quality: q(30.0) },
            StageRow { stages: 3, quality: q(31.5) },
        ];
        let text = stages_csv(&rows).unwrap();
        assert_eq!(
            text,
            "stages,psnr,ssim,sam\n2,30.000000,0.500000,0.100000\n3,31.500000,0.500000,0.100000\n"
        );
        let m = modules_csv(&[ModuleRow { variant: Variant::None, quality: q(20.0) }]).unwrap();
        assert!(m.starts_with("variant,tsvd,topk,psnr,ssim,sam\nnone,false,false,20.0"));
    }

    #[test]
    fn plot_is_well_formed() {
        let rows = vec![StageRow { stages: 2, quality: q(30.0) }];
        let svg = stage_plot_svg(&rows);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn invalid_configs() {
        let cfg = AblationConfig {
            eval_size: 8,
            ..AblationConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AblationConfig {
            stage_sweep: vec![],
            ..AblationConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
