//! Test-time personalization from a new user's preferred pairs: masked
//! style modeling, plus the style-averaging and cosine-weighted baselines.

mod pienet;

pub use pienet::{train_pienet_baseline, triplet_loss, PieNetConfig, PieNetModel, PieNetReport, PreferenceVector};

use serde::{Deserialize, Serialize};

use crate::corpus::PreferredSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::{cosine, ContentEmbedding, MsmModel, StyleEmbedding};

/// Below this total cosine weight the weighted baseline falls back to the
/// plain mean.
pub const WEIGHT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Masked,
    Average,
    Weighted,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Masked, Method::Average, Method::Weighted];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Masked => "masked",
            Method::Average => "average",
            Method::Weighted => "weighted",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Method::Masked),
            "average" => Ok(Method::Average),
            "weighted" => Ok(Method::Weighted),
            other => Err(Error::InvalidInput(format!("unknown method `{other}` (expected masked, average or weighted)"))),
        }
    }
}

/// Content and style embeddings of a preferred set, computed once and
/// reused for any number of unseen images.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub contents: Vec<ContentEmbedding>,
    pub styles: Vec<StyleEmbedding>,
}

impl PreparedSet {
    pub fn new(model: &MsmModel, prefs: &PreferredSet) -> Result<Self> {
        if prefs.is_empty() {
            return Err(Error::EmptyPreferredSet);
        }
        prefs.validate()?;
        let xs: Vec<&Image> = prefs.pairs.iter().map(|p| &p.original).collect();
        let pairs: Vec<(&Image, &Image)> = prefs.pairs.iter().map(|p| (&p.original, &p.retouched)).collect();
        Ok(Self { contents: model.content_embed_batch(&xs)?, styles: model.style_embed_batch(&pairs)? })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    /// Restricts to the given pair indices.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            contents: idx.iter().map(|&i| self.contents[i].clone()).collect(),
            styles: idx.iter().map(|&i| self.styles[i].clone()).collect(),
        }
    }
}

/// Cosine-weighted style: `Σ w_i s_i / Σ w_i` with `w_i = cos(c_i, c_unseen)`,
/// or the plain mean when `Σ w_i <= WEIGHT_EPS`.
pub fn weighted_style(contents: &[ContentEmbedding], styles: &[StyleEmbedding], unseen: &ContentEmbedding) -> Result<StyleEmbedding> {
    if styles.is_empty() {
        return Err(Error::EmptyPreferredSet);
    }
    let w: Vec<f64> = contents.iter().map(|c| cosine(&c.0, &unseen.0)).collect();
    let total: f64 = w.iter().sum();
    if total <= WEIGHT_EPS {
        return StyleEmbedding::mean(styles);
    }
    let mut acc = vec![0.0; styles[0].0.len()];
    for (s, wi) in styles.iter().zip(&w) {
        for (a, v) in acc.iter_mut().zip(&s.0) {
            *a += wi * v;
        }
    }
    Ok(StyleEmbedding(acc.into_iter().map(|v| v / total).collect()))
}

/// Style for each unseen image under `method`, plus the attention rollout
/// for the masked method.
pub fn predict_styles(
    model: &MsmModel,
    prepared: &PreparedSet,
    method: Method,
    unseen: &[&Image],
) -> Result<Vec<(StyleEmbedding, Option<Vec<f64>>)>> {
    if prepared.is_empty() {
        return Err(Error::EmptyPreferredSet);
    }
    if unseen.is_empty() {
        return Ok(Vec::new());
    }
    match method {
        Method::Average => {
            let v = StyleEmbedding::mean(&prepared.styles)?;
            Ok(unseen.iter().map(|_| (v.clone(), None)).collect())
        }
        Method::Weighted => {
            let cs = model.content_embed_batch(unseen)?;
            cs.iter().map(|c| Ok((weighted_style(&prepared.contents, &prepared.styles, c)?, None))).collect()
        }
        Method::Masked => {
            let cs = model.content_embed_batch(unseen)?;
            let pairs: Vec<(ContentEmbedding, StyleEmbedding)> =
                prepared.contents.iter().cloned().zip(prepared.styles.iter().cloned()).collect();
            let inputs = cs.iter().map(|c| model.build_input(&pairs, c)).collect::<Result<Vec<_>>>()?;
            let (styles, rollouts) = model.predict_styles_batch(&inputs)?;
            Ok(styles.into_iter().zip(rollouts).map(|(s, r)| (s, Some(r))).collect())
        }
    }
}

/// Enhances each unseen image with its predicted style. Outputs keep each
/// unseen image's size.
pub fn personalize_batch(
    model: &MsmModel,
    prepared: &PreparedSet,
    method: Method,
    unseen: &[&Image],
) -> Result<Vec<(Image, StyleEmbedding, Option<Vec<f64>>)>> {
    let styles = predict_styles(model, prepared, method, unseen)?;
    let ss: Vec<StyleEmbedding> = styles.iter().map(|s| s.0.clone()).collect();
    let enhanced = model.enhance_batch(unseen, &ss)?;
    enhanced
        .into_iter()
        .zip(unseen)
        .zip(styles)
        .map(|((img, x), (s, att))| {
            let img = if img.dims() == x.dims() { img } else { img.resize(x.height(), x.width())? };
            Ok((img, s, att))
        })
        .collect()
}

fn single(model: &MsmModel, prefs: &PreferredSet, unseen: &Image, method: Method) -> Result<(Image, StyleEmbedding, Option<Vec<f64>>)> {
    let prepared = PreparedSet::new(model, prefs)?;
    Ok(personalize_batch(model, &prepared, method, &[unseen])?.remove(0))
}

/// Masked style modeling: returns the enhanced image, the predicted style
/// and the attention rollout over the preferred pairs.
pub fn personalize_masked(model: &MsmModel, prefs: &PreferredSet, unseen: &Image) -> Result<(Image, StyleEmbedding, Vec<f64>)> {
    let (img, s, att) = single(model, prefs, unseen, Method::Masked)?;
    Ok((img, s, att.unwrap_or_default()))
}

/// Applies the mean preferred style regardless of the unseen content.
pub fn personalize_average(model: &MsmModel, prefs: &PreferredSet, unseen: &Image) -> Result<Image> {
    Ok(single(model, prefs, unseen, Method::Average)?.0)
}

/// Applies the cosine-weighted mean of the preferred styles.
pub fn personalize_weighted(model: &MsmModel, prefs: &PreferredSet, unseen: &Image) -> Result<Image> {
    Ok(single(model, prefs, unseen, Method::Weighted)?.0)
}
