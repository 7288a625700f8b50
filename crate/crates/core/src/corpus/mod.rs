//! Synthetic training corpus: procedural scenes, pseudo-users with
//! class-dependent retouch tables, and the degrading model used to
//! manufacture pseudo pairs.

mod degrader;
mod scene;

pub use degrader::{degrade, degrader_training_pairs, mean_abs_error, train_degrader, DegradeModel, DegraderConfig, DegraderReport};
pub use scene::{class_hue, hue_distance, hue_of, synth_scene};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::retouch::{apply_retouch, RetouchParams};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PreferredPair {
    pub original: Image,
    pub retouched: Image,
    pub content_class: usize,
}

impl PreferredPair {
    pub fn new(original: Image, retouched: Image, content_class: usize) -> Result<Self> {
        original.ensure_same_dims(&retouched)?;
        Ok(Self { original, retouched, content_class })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferredSet {
    pub user_label: String,
    pub pairs: Vec<PreferredPair>,
}

impl PreferredSet {
    pub fn new(user_label: impl Into<String>, pairs: Vec<PreferredPair>) -> Result<Self> {
        let set = Self { user_label: user_label.into(), pairs };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.pairs.first() {
            for p in &self.pairs {
                p.original.ensure_same_dims(&p.retouched)?;
                first.original.ensure_same_dims(&p.original)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoUser {
    pub user_id: usize,
    /// One entry per content class, or a single entry for every class.
    pub style_table: Vec<RetouchParams>,
    pub content_aware: bool,
}

impl PseudoUser {
    pub fn params_for(&self, class: usize) -> &RetouchParams {
        if self.content_aware {
            &self.style_table[class]
        } else {
            &self.style_table[0]
        }
    }

    /// Draws a user. Content-aware users get one parameter set per class
    /// with exposures spread over distinct levels, so classes differ in
    /// brightness as well as in the remaining operators.
    pub fn sample(user_id: usize, n_classes: usize, content_aware: bool, rng: &mut impl Rng) -> Self {
        let style_table = if content_aware {
            let mut levels: Vec<f64> =
                (0..n_classes).map(|i| -0.8 + 1.6 * i as f64 / (n_classes - 1).max(1) as f64).collect();
            levels.shuffle(rng);
            levels
                .into_iter()
                .map(|ev| {
                    let jitter = rng.random_range(-0.1..0.1);
                    random_params(rng, ev + jitter)
                })
                .collect()
        } else {
            let ev = rng.random_range(-0.8..0.8);
            vec![random_params(rng, ev)]
        };
        Self { user_id, style_table, content_aware }
    }
}

/// Random retouch parameters with the given exposure.
pub fn random_params(rng: &mut impl Rng, exposure_ev: f64) -> RetouchParams {
    let tone_curve_knots = rng.random_bool(0.3).then(|| {
        [0.25, 0.5, 0.75].iter().map(|&k| (k, k + rng.random_range(-0.08..0.08))).collect()
    });
    RetouchParams {
        gamma: rng.random_range(-0.4f64..0.4).exp(),
        exposure_ev,
        contrast: rng.random_range(-0.5f64..0.5).exp(),
        saturation: rng.random_range(0.3..1.7),
        temperature_shift: rng.random_range(-0.25..0.25),
        tone_curve_knots,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_users: usize,
    pub images_per_user: usize,
    pub image_size: usize,
    pub n_content_classes: usize,
    /// Share of users whose retouch depends on content.
    pub content_aware_fraction: f64,
    pub seed: u64,
    /// When set, originals are replaced by degrader outputs of the retouched images.
    pub pseudo_pairs: Option<DegraderConfig>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_users: 40,
            images_per_user: 30,
            image_size: 16,
            n_content_classes: 3,
            content_aware_fraction: 0.75,
            seed: 0,
            pseudo_pairs: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 2 {
            return Err(Error::config("corpus.n_users", "at least 2 users are required"));
        }
        if self.images_per_user < 2 {
            return Err(Error::config("corpus.images_per_user", "at least 2 pairs per user are required"));
        }
        if self.n_content_classes < 2 {
            return Err(Error::config("corpus.n_content_classes", "at least 2 content classes are required"));
        }
        if self.image_size < crate::image::MIN_SIDE {
            return Err(Error::config("corpus.image_size", format!("must be >= {}", crate::image::MIN_SIDE)));
        }
        if !(0.0..=1.0).contains(&self.content_aware_fraction) {
            return Err(Error::config("corpus.content_aware_fraction", "must lie in [0, 1]"));
        }
        if let Some(d) = &self.pseudo_pairs {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserData {
    pub user: PseudoUser,
    pub set: PreferredSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub users: Vec<UserData>,
}

impl Corpus {
    pub fn num_pairs(&self) -> usize {
        self.users.iter().map(|u| u.set.len()).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PreferredPair> {
        self.users.iter().flat_map(|u| u.set.pairs.iter())
    }
}

fn user_rng(seed: u64, user_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xA24B_AED4_963E_E407) ^ (user_id as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25))
}

/// Builds the corpus; a pure function of `cfg`.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let degrader = match &cfg.pseudo_pairs {
        Some(dc) => {
            let pairs = degrader_training_pairs(dc, cfg.image_size, cfg.n_content_classes, cfg.seed ^ 0xD3C0)?;
            Some(train_degrader(&pairs, dc)?.0)
        }
        None => None,
    };
    let n_aware = (cfg.content_aware_fraction * cfg.n_users as f64).round() as usize;
    let mut users = Vec::with_capacity(cfg.n_users);
    for user_id in 0..cfg.n_users {
        let mut rng = user_rng(cfg.seed, user_id);
        let user = PseudoUser::sample(user_id, cfg.n_content_classes, user_id < n_aware, &mut rng);
        let mut pairs = Vec::with_capacity(cfg.images_per_user);
        for _ in 0..cfg.images_per_user {
            let class = rng.random_range(0..cfg.n_content_classes);
            let clean = synth_scene(class, cfg.n_content_classes, rng.random(), cfg.image_size)?;
            let retouched = apply_retouch(&clean, user.params_for(class))?;
            let original = match &degrader {
                Some(m) => degrade(m, &retouched)?,
                None => clean,
            };
            pairs.push(PreferredPair::new(original, retouched, class)?);
        }
        users.push(UserData { set: PreferredSet::new(format!("user{user_id}"), pairs)?, user });
    }
    Ok(Corpus { config: cfg.clone(), users })
}

#[derive(Serialize, Deserialize)]
struct ManifestPair {
    x: String,
    y: String,
    content_class: usize,
    params: RetouchParams,
}

#[derive(Serialize, Deserialize)]
struct ManifestUser {
    user_id: usize,
    content_aware: bool,
    style_table: Vec<RetouchParams>,
    pairs: Vec<ManifestPair>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: CorpusConfig,
    users: Vec<ManifestUser>,
}

/// Writes `manifest.json` plus `corpus/<user_id>/<index>_{x,y}.png` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let mut users = Vec::new();
    for u in &corpus.users {
        let rel_dir = format!("corpus/{}", u.user.user_id);
        fs::create_dir_all(dir.join(&rel_dir))?;
        let mut pairs = Vec::new();
        for (i, p) in u.set.pairs.iter().enumerate() {
            let x = format!("{rel_dir}/{i}_x.png");
            let y = format!("{rel_dir}/{i}_y.png");
            p.original.write_png(dir.join(&x))?;
            p.retouched.write_png(dir.join(&y))?;
            pairs.push(ManifestPair { x, y, content_class: p.content_class, params: u.user.params_for(p.content_class).clone() });
        }
        users.push(ManifestUser {
            user_id: u.user.user_id,
            content_aware: u.user.content_aware,
            style_table: u.user.style_table.clone(),
            pairs,
        });
    }
    let manifest = Manifest { format: "msm-corpus-v1".into(), config: corpus.config.clone(), users };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a corpus written by [`write_corpus`]. Pixels come back 8-bit quantized.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut users = Vec::new();
    for mu in manifest.users {
        let mut pairs = Vec::new();
        for mp in &mu.pairs {
            let x = Image::read_png(dir.join(&mp.x))?;
            let y = Image::read_png(dir.join(&mp.y))?;
            pairs.push(PreferredPair::new(x, y, mp.content_class)?);
        }
        users.push(UserData {
            set: PreferredSet::new(format!("user{}", mu.user_id), pairs)?,
            user: PseudoUser { user_id: mu.user_id, style_table: mu.style_table, content_aware: mu.content_aware },
        });
    }
    Ok(Corpus { config: manifest.config, users })
}
