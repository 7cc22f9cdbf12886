//! The full Siamese network: shared branch, self-attention on the exemplar
//! side only, and the correlation head.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, AttentionConfig, SelfAttention};
use crate::backbone::{BackboneConfig, Branch, BranchCache, EXEMPLAR_SIZE, SEARCH_SIZE};
use crate::error::{contract, Result};
use crate::head::{map_loss, HeadCache, LabelMap, ScoreMap, SiameseHead};
use crate::layers::ForwardCtx;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full(),
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            attention: AttentionConfig {
                r: 4,
                residual: false,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SiamModel {
    pub config: ModelConfig,
    pub branch: Branch,
    pub attention: SelfAttention,
    pub head: SiameseHead,
}

pub struct PairCache<T> {
    exemplar: BranchCache<T>,
    attention: AttentionCache<T>,
    search: BranchCache<T>,
    head: HeadCache<T>,
}

/// Result of one forward/backward pass over a batch of pairs.
pub struct PairStep<T> {
    pub loss: f64,
    pub grads: ParamStore<T>,
    pub scores: Vec<ScoreMap<T>>,
}

impl SiamModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let branch = Branch::new(config.backbone.clone())?;
        let attention = SelfAttention::new(branch.embed_channels(), config.attention.clone())?;
        Ok(SiamModel {
            config,
            branch,
            attention,
            head: SiameseHead,
        })
    }

    /// Side of the score map for the standard exemplar and search sizes.
    pub fn score_size(&self) -> Result<usize> {
        Ok(self.branch.output_size(SEARCH_SIZE)? - self.branch.output_size(EXEMPLAR_SIZE)? + 1)
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(seed, 0x51A3);
        self.branch.init_into(&mut params, &mut rng)?;
        self.attention.init_into(&mut params, &mut rng)?;
        self.head.init_into(&mut params)?;
        Ok(params)
    }

    /// Verifies that `params` holds every tensor the model needs, with the
    /// right shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let reference = self.init_params::<T>(0)?;
        for (name, t, _) in reference.iter() {
            let p = params.get(name)?;
            if p.shape() != t.shape() {
                return Err(contract!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    p.shape(),
                    t.shape()
                ));
            }
        }
        Ok(())
    }

    /// Exemplar embedding: branch followed by self-attention.
    pub fn embed_exemplar<T: Scalar>(
        &self,
        exemplar: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Tensor<T>> {
        let (z, _) = self.branch.forward(exemplar, params, ctx)?;
        Ok(self.attention.forward(&z, params)?.0)
    }

    pub fn embed_search<T: Scalar>(
        &self,
        search: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.branch.forward(search, params, ctx)?.0)
    }

    pub fn score<T: Scalar>(
        &self,
        exemplar_embedding: &Tensor<T>,
        search_embedding: &Tensor<T>,
        params: &ParamStore<T>,
    ) -> Result<Vec<ScoreMap<T>>> {
        Ok(self.head.forward(exemplar_embedding, search_embedding, params)?.0)
    }

    pub fn forward_pairs<T: Scalar>(
        &self,
        exemplars: &Tensor<T>,
        searches: &Tensor<T>,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<(Vec<ScoreMap<T>>, PairCache<T>)> {
        let (z, exemplar) = self.branch.forward(exemplars, params, ctx)?;
        let (za, attention) = self.attention.forward(&z, params)?;
        let (x, search) = self.branch.forward(searches, params, ctx)?;
        let (scores, head) = self.head.forward(&za, &x, params)?;
        Ok((
            scores,
            PairCache {
                exemplar,
                attention,
                search,
                head,
            },
        ))
    }

    pub fn backward_pairs<T: Scalar>(
        &self,
        cache: &PairCache<T>,
        score_grads: &[Vec<T>],
        params: &ParamStore<T>,
    ) -> Result<ParamStore<T>> {
        let mut grads = params.zeros_like();
        let (dza, dx) = self.head.backward(&cache.head, score_grads, params, &mut grads)?;
        self.branch.backward(&cache.search, &dx, params, &mut grads)?;
        let dz = self.attention.backward(&cache.attention, &dza, params, &mut grads)?;
        self.branch.backward(&cache.exemplar, &dz, params, &mut grads)?;
        Ok(grads)
    }

    /// Batch-mean map loss and its parameter gradients.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        exemplars: &Tensor<T>,
        searches: &Tensor<T>,
        labels: &[LabelMap],
        balanced: bool,
        params: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<PairStep<T>> {
        let (scores, cache) = self.forward_pairs(exemplars, searches, params, ctx)?;
        if labels.len() != scores.len() {
            return Err(contract!("{} label maps for {} pairs", labels.len(), scores.len()));
        }
        let b = scores.len() as f64;
        let mut loss = 0.0;
        let mut dscores = Vec::with_capacity(scores.len());
        for (s, l) in scores.iter().zip(labels) {
            let (li, g) = map_loss(&s.values, l, balanced)?;
            loss += li / b;
            dscores.push(g.into_iter().map(|v| v / T::from_f64(b)).collect());
        }
        let grads = self.backward_pairs(&cache, &dscores, params)?;
        Ok(PairStep {
            loss,
            grads,
            scores,
        })
    }
}
