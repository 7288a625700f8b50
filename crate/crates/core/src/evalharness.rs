//! Evaluation protocol on held-out users, ablations and report tables.
//!
//! For every sampling a preferred set of `I_new` pairs is drawn from each
//! held-out user and all of that user's remaining pairs are enhanced as
//! unseen images. A cell's mean and std are taken over samplings
//! (population std), each sampling contributing the mean over all unseen
//! images of all held-out users.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PreferredPair, PreferredSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::MetricReport;
use crate::nets::{MsmModel, NetConfig, StyleMode};
use crate::personalize::{personalize_batch, Method, PreparedSet};
use crate::training::{train_step1, train_step2, LossConfig, TrainConfig};

/// Preferred pairs drawn per included class in the category split.
pub const CATEGORY_SPLIT_PER_CLASS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub i_new_values: Vec<usize>,
    pub n_samplings: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Adds the class-exclusion matrix to the report.
    pub category_split: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { i_new_values: vec![1, 2, 5, 20, 50], n_samplings: 10, seed: 0, methods: Method::ALL.to_vec(), category_split: false }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samplings == 0 {
            return Err(Error::config("bench.n_samplings", "must be >= 1"));
        }
        if self.i_new_values.is_empty() || self.i_new_values.contains(&0) {
            return Err(Error::config("bench.i_new_values", "needs at least one value, all >= 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("bench.methods", "needs at least one method"));
        }
        Ok(())
    }
}

/// Mean and population std over `n` samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub i_new: usize,
    pub psnr: Stat,
    pub ssim: Stat,
    pub delta_e: Stat,
    /// Unseen images scored per sampling.
    pub images_per_sampling: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_split: Option<CategorySplitReport>,
}

impl BenchmarkReport {
    pub fn cell(&self, method: Method, i_new: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.i_new == i_new)
    }

    /// PSNR/SSIM/ΔE table, one row per (method, I_new).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>6} {:>16} {:>16} {:>16}", "method", "I_new", "PSNR (dB)", "SSIM", "dE_ab");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>16} {:>16} {:>16}",
                c.method.as_str(),
                c.i_new,
                format!("{:.2}±{:.2}", c.psnr.mean, c.psnr.std),
                format!("{:.4}±{:.4}", c.ssim.mean, c.ssim.std),
                format!("{:.2}±{:.2}", c.delta_e.mean, c.delta_e.std),
            );
        }
        if let Some(cs) = &self.category_split {
            out.push('\n');
            out.push_str(&cs.to_table());
        }
        out
    }
}

fn sampling_rng(seed: u64, tag: u64, i_new: usize, sampling: usize) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add((i_new as u64) << 20)
        .wrapping_add(sampling as u64);
    ChaCha8Rng::seed_from_u64(mix)
}

fn check_enough(corpus: &Corpus, i_new: usize) -> Result<()> {
    if corpus.users.is_empty() {
        return Err(Error::NotEnoughData("no held-out users".into()));
    }
    for u in &corpus.users {
        if u.set.len() <= i_new {
            return Err(Error::NotEnoughData(format!(
                "I_new = {i_new} needs more than {i_new} pairs per held-out user, user {} has {}",
                u.user.user_id,
                u.set.len()
            )));
        }
    }
    Ok(())
}

/// Scores the unseen pairs under every method.
fn score(model: &MsmModel, prefs: &[PreferredPair], unseen: &[&PreferredPair], methods: &[Method]) -> Result<Vec<Vec<MetricReport>>> {
    let set = PreferredSet::new("eval", prefs.to_vec())?;
    let prepared = PreparedSet::new(model, &set)?;
    let xs: Vec<&Image> = unseen.iter().map(|p| &p.original).collect();
    methods
        .iter()
        .map(|&m| {
            personalize_batch(model, &prepared, m, &xs)?
                .iter()
                .zip(unseen)
                .map(|((img, _, _), p)| MetricReport::compute(img, &p.retouched))
                .collect()
        })
        .collect()
}

pub fn run_benchmark(model: &MsmModel, test: &Corpus, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    for &i in &cfg.i_new_values {
        check_enough(test, i)?;
    }
    let mut cells = Vec::new();
    for &i_new in &cfg.i_new_values {
        // per method, per sampling: metric means
        let mut acc = vec![[Vec::new(), Vec::new(), Vec::new()]; cfg.methods.len()];
        let mut images = 0;
        for s in 0..cfg.n_samplings {
            let mut rng = sampling_rng(cfg.seed, 0, i_new, s);
            let mut sums = vec![[0.0; 3]; cfg.methods.len()];
            images = 0;
            for u in &test.users {
                let mut idx: Vec<usize> = (0..u.set.len()).collect();
                idx.shuffle(&mut rng);
                let prefs: Vec<PreferredPair> = idx[..i_new].iter().map(|&i| u.set.pairs[i].clone()).collect();
                let unseen: Vec<&PreferredPair> = idx[i_new..].iter().map(|&i| &u.set.pairs[i]).collect();
                images += unseen.len();
                for (m, reports) in score(model, &prefs, &unseen, &cfg.methods)?.into_iter().enumerate() {
                    for r in reports {
                        sums[m][0] += r.psnr_db;
                        sums[m][1] += r.ssim;
                        sums[m][2] += r.delta_e_ab;
                    }
                }
            }
            for (m, s) in sums.iter().enumerate() {
                for k in 0..3 {
                    acc[m][k].push(s[k] / images as f64);
                }
            }
        }
        for (m, &method) in cfg.methods.iter().enumerate() {
            cells.push(Cell {
                method,
                i_new,
                psnr: Stat::of(&acc[m][0]),
                ssim: Stat::of(&acc[m][1]),
                delta_e: Stat::of(&acc[m][2]),
                images_per_sampling: images,
            });
        }
    }
    let category_split = if cfg.category_split { Some(run_category_split(model, test, cfg)?) } else { None };
    Ok(BenchmarkReport { config: cfg.clone(), cells, category_split })
}

/// Masked-method PSNR when one class is left out of the preferred set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySplitReport {
    pub n_classes: usize,
    /// `psnr[e][c]`: mean PSNR on unseen images of class `c` when class `e`
    /// was excluded from the preferred set.
    pub psnr: Vec<Vec<f64>>,
    /// Unseen images behind each entry.
    pub counts: Vec<Vec<usize>>,
    pub excluded_mean: f64,
    pub included_mean: f64,
}

impl CategorySplitReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("excluded \\ unseen");
        for c in 0..self.n_classes {
            let _ = write!(out, " {:>9}", format!("class {c}"));
        }
        out.push('\n');
        for (e, row) in self.psnr.iter().enumerate() {
            let _ = write!(out, "{:<17}", format!("class {e}"));
            for v in row {
                let _ = write!(out, " {v:>9.2}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "excluded-class mean {:.2} dB, included-class mean {:.2} dB", self.excluded_mean, self.included_mean);
        out
    }
}

/// For each class `e`, the preferred set holds up to
/// [`CATEGORY_SPLIT_PER_CLASS`] pairs of every other class and none of `e`;
/// the user's remaining pairs are scored split by class.
pub fn run_category_split(model: &MsmModel, test: &Corpus, cfg: &BenchmarkConfig) -> Result<CategorySplitReport> {
    cfg.validate()?;
    let k = test.config.n_content_classes;
    let mut sum = vec![vec![0.0; k]; k];
    let mut cnt = vec![vec![0usize; k]; k];
    for e in 0..k {
        for s in 0..cfg.n_samplings {
            let mut rng = sampling_rng(cfg.seed, 1 + e as u64, 0, s);
            for u in &test.users {
                let mut idx: Vec<usize> = (0..u.set.len()).collect();
                idx.shuffle(&mut rng);
                let mut taken = vec![0usize; k];
                let (mut prefs, mut unseen) = (Vec::new(), Vec::new());
                for &i in &idx {
                    let p = &u.set.pairs[i];
                    let c = p.content_class;
                    if c != e && taken[c] < CATEGORY_SPLIT_PER_CLASS {
                        taken[c] += 1;
                        prefs.push(p.clone());
                    } else {
                        unseen.push(p);
                    }
                }
                if prefs.is_empty() || unseen.is_empty() {
                    continue;
                }
                let reports = score(model, &prefs, &unseen, &[Method::Masked])?.remove(0);
                for (r, p) in reports.iter().zip(&unseen) {
                    sum[e][p.content_class] += r.psnr_db;
                    cnt[e][p.content_class] += 1;
                }
            }
        }
    }
    let psnr: Vec<Vec<f64>> =
        sum.iter().zip(&cnt).map(|(s, n)| s.iter().zip(n).map(|(a, &b)| if b > 0 { a / b as f64 } else { f64::NAN }).collect()).collect();
    let (mut ex, mut exn, mut inc, mut incn) = (0.0, 0usize, 0.0, 0usize);
    for e in 0..k {
        for c in 0..k {
            if e == c {
                ex += sum[e][c];
                exn += cnt[e][c];
            } else {
                inc += sum[e][c];
                incn += cnt[e][c];
            }
        }
    }
    if exn == 0 || incn == 0 {
        return Err(Error::NotEnoughData("category split found no unseen images on one side".into()));
    }
    Ok(CategorySplitReport { n_classes: k, psnr, counts: cnt, excluded_mean: ex / exn as f64, included_mean: inc / incn as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contentedness {
    /// Mean rollout mass on preferred pairs sharing the unseen image's class.
    pub same_class_mass: f64,
    /// Mean of `k_same / I_new`, the mass a uniform attention would give.
    pub uniform_share: f64,
    pub n_unseen: usize,
}

impl Contentedness {
    pub fn excess(&self) -> f64 {
        self.same_class_mass - self.uniform_share
    }
}

/// Attention mass that the masked row puts on same-class preferred pairs,
/// averaged over the unseen images of every sampling.
pub fn attention_contentedness(model: &MsmModel, test: &Corpus, i_new: usize, n_samplings: usize, seed: u64) -> Result<Contentedness> {
    if i_new == 0 || n_samplings == 0 {
        return Err(Error::InvalidInput("i_new and n_samplings must be >= 1".into()));
    }
    check_enough(test, i_new)?;
    let (mut mass, mut uniform, mut n) = (0.0, 0.0, 0usize);
    for s in 0..n_samplings {
        let mut rng = sampling_rng(seed, 99, i_new, s);
        for u in &test.users {
            let mut idx: Vec<usize> = (0..u.set.len()).collect();
            idx.shuffle(&mut rng);
            let prefs = PreferredSet::new("eval", idx[..i_new].iter().map(|&i| u.set.pairs[i].clone()).collect())?;
            let prepared = PreparedSet::new(model, &prefs)?;
            let unseen: Vec<&PreferredPair> = idx[i_new..].iter().map(|&i| &u.set.pairs[i]).collect();
            let xs: Vec<&Image> = unseen.iter().map(|p| &p.original).collect();
            let styles = crate::personalize::predict_styles(model, &prepared, Method::Masked, &xs)?;
            for ((_, att), p) in styles.iter().zip(&unseen) {
                let att = att.as_ref().expect("masked method returns attention");
                let same: Vec<bool> = prefs.pairs.iter().map(|q| q.content_class == p.content_class).collect();
                mass += att.iter().zip(&same).filter(|(_, s)| **s).map(|(a, _)| a).sum::<f64>();
                uniform += same.iter().filter(|s| **s).count() as f64 / i_new as f64;
                n += 1;
            }
        }
    }
    Ok(Contentedness { same_class_mass: mass / n as f64, uniform_share: uniform / n as f64, n_unseen: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub i_new: usize,
    pub psnr: Stat,
    pub ssim: Stat,
    pub delta_e: Stat,
    /// `|s(x, x)|` averaged over the held-out originals.
    pub zero_style_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{}\n", self.name);
        let _ = writeln!(out, "{:<12} {:>6} {:>14} {:>10}", "variant", "I_new", "PSNR (dB)", "|s(x,x)|");
        for r in &self.rows {
            let _ = writeln!(out, "{:<12} {:>6} {:>14} {:>10.3e}", r.label, r.i_new, format!("{:.2}±{:.2}", r.psnr.mean, r.psnr.std), r.zero_style_norm);
        }
        out
    }
}

fn zero_style_norm(model: &MsmModel, test: &Corpus) -> Result<f64> {
    let xs: Vec<&Image> = test.pairs().map(|p| &p.original).collect();
    let pairs: Vec<(&Image, &Image)> = xs.iter().map(|x| (*x, *x)).collect();
    let s = model.style_embed_batch(&pairs)?;
    Ok(s.iter().map(|e| e.norm()).sum::<f64>() / s.len().max(1) as f64)
}

fn masked_row(label: String, model: &MsmModel, test: &Corpus, bench: &BenchmarkConfig, i_new: usize) -> Result<AblationRow> {
    let cfg = BenchmarkConfig { i_new_values: vec![i_new], methods: vec![Method::Masked], category_split: false, ..bench.clone() };
    let cell = run_benchmark(model, test, &cfg)?.cells.remove(0);
    Ok(AblationRow { label, i_new, psnr: cell.psnr, ssim: cell.ssim, delta_e: cell.delta_e, zero_style_norm: zero_style_norm(model, test)? })
}

/// Trains both steps from scratch.
pub fn train_pipeline(train: &Corpus, net: &NetConfig, tc: &TrainConfig, loss: &LossConfig) -> Result<MsmModel> {
    let mut model = MsmModel::new(net.clone())?;
    train_step1(train, &mut model, tc, loss, |_| {})?;
    train_step2(train, &mut model, tc, |_| {})?;
    Ok(model)
}

/// Retrains step 2 for every grid side `l`, keeping the step-1 networks of
/// `base`. A value equal to `base`'s own grid reuses `base` as is.
pub fn run_ablation_l(
    base: &MsmModel,
    train: &Corpus,
    test: &Corpus,
    l_values: &[usize],
    tc: &TrainConfig,
    bench: &BenchmarkConfig,
    i_new: usize,
) -> Result<AblationReport> {
    bench.validate()?;
    let mut rows = Vec::new();
    for &l in l_values {
        let row = if l == base.cfg.grid {
            masked_row(format!("l={l}"), base, test, bench, i_new)?
        } else {
            let cfg = NetConfig { grid: l, ..base.cfg.clone() };
            cfg.validate()?;
            let init = MsmModel::new(cfg.clone())?;
            let mut model = MsmModel {
                cfg,
                style: base.style.clone(),
                content: init.content,
                transformer: init.transformer,
                enhancer: base.enhancer.clone(),
            };
            train_step2(train, &mut model, tc, |_| {})?;
            masked_row(format!("l={l}"), &model, test, bench, i_new)?
        };
        rows.push(row);
    }
    Ok(AblationReport { name: "content grid l".into(), rows })
}

/// Residual versus absolute style embeddings, each trained through both
/// steps. A residual model already trained with the same settings can be
/// passed to skip its retraining.
pub fn run_ablation_style(
    train: &Corpus,
    test: &Corpus,
    net: &NetConfig,
    tc: &TrainConfig,
    loss: &LossConfig,
    bench: &BenchmarkConfig,
    i_new: usize,
    residual: Option<&MsmModel>,
) -> Result<AblationReport> {
    bench.validate()?;
    let mut rows = Vec::new();
    for mode in [StyleMode::Residual, StyleMode::Absolute] {
        let label = match mode {
            StyleMode::Residual => "residual",
            StyleMode::Absolute => "absolute",
        };
        let trained;
        let model = match (mode, residual) {
            (StyleMode::Residual, Some(m)) if m.cfg.style_mode == StyleMode::Residual => m,
            _ => {
                trained = train_pipeline(train, &NetConfig { style_mode: mode, ..net.clone() }, tc, loss)?;
                &trained
            }
        };
        rows.push(masked_row(label.into(), model, test, bench, i_new)?);
    }
    Ok(AblationReport { name: "style embedding".into(), rows })
}
