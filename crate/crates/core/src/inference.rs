//! Guided generation: pick a training video as structural source, invert it
//! to noise under its own caption, then sample under the requested prompt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_invert, ddim_sample, DiffusionSetup, NoisePredictor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::retrieval::{embed_prompt, PromptStore};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    /// The stored video whose prompt is most similar to the request.
    Retrieval,
    /// The most recently learned video.
    Last,
}

impl Guidance {
    pub const ALL: [Guidance; 2] = [Guidance::Last, Guidance::Retrieval];

    pub fn name(self) -> &'static str {
        match self {
            Guidance::Retrieval => "retrieval",
            Guidance::Last => "last",
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Guidance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Guidance::Retrieval),
            "last" => Ok(Guidance::Last),
            _ => Err(Error::invalid(format!("unknown guidance {s:?} (retrieval|last)"))),
        }
    }
}

/// Lookup of training videos by id.
pub trait VideoSource {
    fn video(&self, id: &str) -> Result<Tensor>;
}

impl VideoSource for Dataset {
    fn video(&self, id: &str) -> Result<Tensor> {
        self.get(id)
            .map(|s| s.video.clone())
            .ok_or_else(|| Error::format("dataset", format!("no video with id {id:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub video_id: String,
    pub prompt: String,
    /// Similarity of the request to `prompt`, for retrieval guidance.
    pub score: Option<f64>,
}

pub fn select_source(store: &PromptStore, prompt: &str, guidance: Guidance) -> Result<Source> {
    match guidance {
        Guidance::Retrieval => {
            let r = store.retrieve(prompt)?;
            Ok(Source {
                video_id: r.video_id,
                prompt: r.prompt,
                score: Some(r.score),
            })
        }
        Guidance::Last => {
            let e = store.last()?;
            Ok(Source {
                video_id: e.video_id.clone(),
                prompt: e.prompt.clone(),
                score: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub video: Tensor,
    pub source: Source,
}

pub fn guided_generate(
    model: &impl NoisePredictor,
    setup: &DiffusionSetup,
    store: &PromptStore,
    videos: &dyn VideoSource,
    prompt: &str,
    guidance: Guidance,
) -> Result<Generation> {
    let target = embed_prompt(prompt)?;
    let source = select_source(store, prompt, guidance)?;
    let source_video = videos.video(&source.video_id)?;
    let source_cond = embed_prompt(&source.prompt)?;
    let z_top = ddim_invert(
        model,
        &source_video,
        source_cond.as_slice(),
        &setup.invert_plan,
        &setup.schedule,
    )?;
    let video = ddim_sample(model, &z_top, target.as_slice(), &setup.sample_plan, &setup.schedule)?;
    if !video.is_finite() {
        return Err(Error::NonFinite(format!("generation for {prompt:?}")));
    }
    Ok(Generation { video, source })
}
