//! Forward passes for the GCN baseline, GRCN, Fast-GRCN and the fixed-graph
//! ablations, plus the parameter containers they share.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseMatrix, SparseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{renormalize, simplified_propagate, truncated_svd_reconstruct};
use crate::layers::{gcn_layers, LayerOptions};
use crate::revision::{
    embed, fast_similarity, kernel_topk, revise, similarity_topk, IndexCache, KernelInput, SimilarityOptions,
    SparsifiedSimilarity, DEFAULT_BLOCK_ROWS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Gcn,
    Grcn,
    FastGrcn,
    /// Rank-k reconstruction of the adjacency.
    Svd,
    /// Feature kernel graph only.
    Fo,
    /// Adjacency plus feature kernel graph.
    Fg,
    /// Adjacency plus kernel graph of two-hop propagated features.
    Rwfg,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Gcn,
        Variant::Grcn,
        Variant::FastGrcn,
        Variant::Svd,
        Variant::Fo,
        Variant::Fg,
        Variant::Rwfg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcn => "gcn",
            Variant::Grcn => "grcn",
            Variant::FastGrcn => "fast-grcn",
            Variant::Svd => "svd",
            Variant::Fo => "fo",
            Variant::Fg => "fg",
            Variant::Rwfg => "rwfg",
        }
    }

    /// Whether the variant learns a revision module.
    pub fn learns_revision(self) -> bool {
        matches!(self, Variant::Grcn | Variant::FastGrcn)
    }

    pub fn is_ablation(self) -> bool {
        matches!(self, Variant::Svd | Variant::Fo | Variant::Fg | Variant::Rwfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let key = if key == "fastgrcn" { "fast-grcn".to_string() } else { key };
        Variant::ALL.into_iter().find(|v| v.name() == key).ok_or_else(|| {
            let valid: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::invalid(format!("unknown variant {s:?}; valid variants: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden_g: usize,
    pub embed_dim: usize,
    pub hidden_c: usize,
    pub topk: usize,
    pub dropout_c: f64,
    pub dropout_g: f64,
    pub svd_rank: usize,
    pub block_rows: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Grcn,
            hidden_g: 64,
            embed_dim: 64,
            hidden_c: 16,
            topk: 5,
            dropout_c: 0.5,
            dropout_g: 0.0,
            svd_rank: 50,
            block_rows: DEFAULT_BLOCK_ROWS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Revision,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: DenseMatrix,
}

/// Ordered named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: DenseMatrix) {
        self.entries.push(Param {
            name: name.into(),
            group,
            value,
        });
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.entries.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const REVISION_W0: &str = "revision.w0";
pub const REVISION_W1: &str = "revision.w1";
pub const CLASSIFICATION_W0: &str = "classification.w0";
pub const CLASSIFICATION_W1: &str = "classification.w1";

/// Matrices a model reads but never trains.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    /// Raw symmetric adjacency, no self-loops.
    pub adjacency: SparseMatrix,
    /// Renormalised adjacency used by GCN and the revision GCN.
    pub normalized: SparseMatrix,
    pub features: SparseMatrix,
    /// Renormalised revised adjacency for the fixed-graph ablations.
    pub fixed_revised: Option<SparseMatrix>,
}

impl ModelInputs {
    pub fn new(adjacency: SparseMatrix, features: SparseMatrix, config: &ModelConfig) -> Result<Self> {
        if adjacency.rows() != features.rows() {
            return Err(Error::shape("model inputs", adjacency.shape(), features.shape()));
        }
        let normalized = renormalize(&adjacency, true)?;
        let fixed_revised = if config.variant.is_ablation() {
            Some(ablation_adjacency(config.variant, &adjacency, &normalized, &features, config)?)
        } else {
            None
        };
        Ok(Self {
            adjacency,
            normalized,
            features,
            fixed_revised,
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Renormalised revised adjacency of a fixed-graph ablation:
/// SVD → `SVD_k(A)`, FO → `K(X)`, FG → `A + K(X)`, RWFG → `A + K(Â²X)`.
pub fn ablation_adjacency(
    variant: Variant,
    adjacency: &SparseMatrix,
    normalized: &SparseMatrix,
    features: &SparseMatrix,
    config: &ModelConfig,
) -> Result<SparseMatrix> {
    let n = adjacency.rows();
    let k = config.topk.min(n);
    let revised = match variant {
        Variant::Svd => {
            let r = truncated_svd_reconstruct(adjacency, config.svd_rank.min(n))?;
            SparseMatrix::from_dense(&r)
        }
        Variant::Fo => kernel_topk(KernelInput::Sparse(features), k, config.block_rows)?,
        Variant::Fg => {
            let s = kernel_topk(KernelInput::Sparse(features), k, config.block_rows)?;
            adjacency.union_add(&s)?.0
        }
        Variant::Rwfg => {
            let walked = normalized.matmul_dense(&normalized.matmul_dense(&features.to_dense())?)?;
            let walked = SparseMatrix::from_dense(&walked);
            let s = kernel_topk(KernelInput::Sparse(&walked), k, config.block_rows)?;
            adjacency.union_add(&s)?.0
        }
        other => return Err(Error::invalid(format!("{other} is not an ablation variant"))),
    };
    renormalize(&revised, true)
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Renormalised revised adjacency, for variants that revise the graph.
    pub revised_adjacency: Option<Var>,
    /// One handle per parameter, in [`ParamSet`] order.
    pub params: Vec<Var>,
}

/// Two-layer GCN: `A · relu(A · drop(X) · W0)` → dropout → `· W1`, propagated by `A`.
pub fn gcn_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    a_norm: Var,
    x: Var,
    weights: &[Var],
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let opts = LayerOptions {
        hidden_relu: true,
        dropout,
    };
    gcn_layers(tape, a_norm, x, weights, opts, training, rng)
}

/// Revision stage of GRCN: embed, build `Ŝ` (freshly or on a cached support),
/// add to `A` and renormalise on the tape.
#[allow(clippy::too_many_arguments)]
pub fn grcn_revised_adjacency<R: Rng + ?Sized>(
    tape: &mut Tape,
    adjacency: Var,
    a_norm: Var,
    x: Var,
    revision_weights: &[Var],
    config: &ModelConfig,
    cache: Option<&IndexCache>,
    training: bool,
    rng: &mut R,
) -> Result<(Var, SparsifiedSimilarity)> {
    let z = embed(tape, a_norm, x, revision_weights, config.dropout_g, training, rng)?;
    let s_hat = match cache {
        Some(cache) => fast_similarity(tape, z, cache)?,
        None => {
            let n = tape.dense(z)?.rows();
            let opts = SimilarityOptions {
                block_rows: config.block_rows,
                symmetrize: true,
            };
            similarity_topk(tape, z, config.topk.min(n), opts)?
        }
    };
    let revised = revise(tape, adjacency, &s_hat)?;
    Ok((tape.renormalize(revised, true)?, s_hat))
}

/// A trainable model instance: configuration, parameters and, for Fast-GRCN,
/// the support frozen on the first forward pass.
#[derive(Clone, Debug)]
pub struct GrcnModel {
    config: ModelConfig,
    params: ParamSet,
    cache: Option<IndexCache>,
}

impl GrcnModel {
    /// Glorot-initialised weights; classification weights are drawn first so
    /// every variant with the same seed starts from the same classifier.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, features: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 || features == 0 {
            return Err(Error::invalid("model needs at least one feature and one class"));
        }
        if config.topk == 0 {
            return Err(Error::invalid("top-K must be at least 1"));
        }
        let mut params = ParamSet::new();
        params.push(
            CLASSIFICATION_W0,
            ParamGroup::Classification,
            DenseMatrix::glorot(features, config.hidden_c, rng),
        );
        params.push(
            CLASSIFICATION_W1,
            ParamGroup::Classification,
            DenseMatrix::glorot(config.hidden_c, classes, rng),
        );
        if config.variant.learns_revision() {
            params.push(REVISION_W0, ParamGroup::Revision, DenseMatrix::glorot(features, config.hidden_g, rng));
            params.push(
                REVISION_W1,
                ParamGroup::Revision,
                DenseMatrix::glorot(config.hidden_g, config.embed_dim, rng),
            );
        }
        Ok(Self {
            config,
            params,
            cache: None,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet, cache: Option<IndexCache>) -> Self {
        Self { config, params, cache }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn index_cache(&self) -> Option<&IndexCache> {
        self.cache.as_ref()
    }

    /// Records the full forward pass on `tape`. Fast-GRCN freezes its support
    /// the first time this runs.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        inputs: &ModelInputs,
        tape: &mut Tape,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        Ok(self.record(inputs, tape, training, false, rng)?.0)
    }

    /// Training-mode pass plus eval-mode logits for the same parameters on
    /// one tape. Without revision dropout the revised graph is built once and
    /// shared; the eval logits equal those of a separate [`Self::predict`].
    pub fn forward_train_eval<R: Rng + ?Sized>(
        &mut self,
        inputs: &ModelInputs,
        tape: &mut Tape,
        rng: &mut R,
    ) -> Result<(ForwardOutput, Var)> {
        let (out, eval) = self.record(inputs, tape, true, true, rng)?;
        Ok((out, eval.expect("eval logits requested")))
    }

    fn record<R: Rng + ?Sized>(
        &mut self,
        inputs: &ModelInputs,
        tape: &mut Tape,
        training: bool,
        with_eval: bool,
        rng: &mut R,
    ) -> Result<(ForwardOutput, Option<Var>)> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let find = |name: &str| -> Result<Var> {
            self.params
                .iter()
                .position(|p| p.name == name)
                .map(|i| params[i])
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
        };
        let classification = [find(CLASSIFICATION_W0)?, find(CLASSIFICATION_W1)?];
        let revision = if self.config.variant.learns_revision() {
            Some([find(REVISION_W0)?, find(REVISION_W1)?])
        } else {
            None
        };
        let x = tape.sparse_constant(inputs.features.clone());

        let a_class = self.classification_graph(inputs, tape, x, revision.as_ref(), training, rng)?;
        let logits = gcn_forward(tape, a_class, x, &classification, self.config.dropout_c, training, rng)?;
        let eval = if with_eval {
            let shared = !training || revision.is_none() || self.config.dropout_g == 0.0;
            let a_eval = if shared {
                a_class
            } else {
                self.classification_graph(inputs, tape, x, revision.as_ref(), false, rng)?
            };
            Some(gcn_forward(tape, a_eval, x, &classification, self.config.dropout_c, false, rng)?)
        } else {
            None
        };
        let revised = (self.config.variant != Variant::Gcn).then_some(a_class);
        let out = ForwardOutput {
            logits,
            revised_adjacency: revised,
            params,
        };
        Ok((out, eval))
    }

    fn classification_graph<R: Rng + ?Sized>(
        &mut self,
        inputs: &ModelInputs,
        tape: &mut Tape,
        x: Var,
        revision: Option<&[Var; 2]>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match (self.config.variant, revision) {
            (Variant::Gcn, _) => Ok(tape.sparse_constant(inputs.normalized.clone())),
            (Variant::Grcn | Variant::FastGrcn, Some(revision)) => {
                let adjacency = tape.sparse_constant(inputs.adjacency.clone());
                let a_norm = tape.sparse_constant(inputs.normalized.clone());
                let fast = self.config.variant == Variant::FastGrcn;
                let cache = if fast { self.cache.as_ref() } else { None };
                let (a_rev, s_hat) = grcn_revised_adjacency(
                    tape,
                    adjacency,
                    a_norm,
                    x,
                    revision,
                    &self.config,
                    cache,
                    training,
                    rng,
                )?;
                if fast && self.cache.is_none() {
                    self.cache = Some(IndexCache::from_similarity(&s_hat));
                }
                Ok(a_rev)
            }
            (Variant::Grcn | Variant::FastGrcn, None) => Err(Error::invalid("missing revision parameters")),
            _ => {
                let fixed = inputs
                    .fixed_revised
                    .clone()
                    .ok_or_else(|| Error::invalid("ablation inputs were built without a revised adjacency"))?;
                Ok(tape.sparse_constant(fixed))
            }
        }
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, inputs: &ModelInputs) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        // Eval mode never draws from the generator.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(inputs, &mut tape, false, &mut rng)?;
        Ok(tape.dense(out.logits)?.clone())
    }
}

/// The GRCN pipeline in its linear, unnormalised, identity-weight form with
/// `K = N` and no symmetrisation: `m` revision layers embed `X`, the full
/// similarity `Z Zᵀ` is added to `A`, and `k` classification layers propagate
/// `X` over the result. Equals `(A + A^m X Xᵀ A^m)^k X`.
pub fn oracle_equivalence_forward(a: &SparseMatrix, x: &DenseMatrix, m: usize, k: usize) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n || x.rows() != n {
        return Err(Error::shape("oracle_equivalence_forward", a.shape(), x.shape()));
    }
    if n == 0 {
        return Err(Error::invalid("oracle pipeline needs at least one node"));
    }
    let f = x.cols();
    let mut tape = Tape::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let av = tape.sparse_constant(a.clone());
    let xv = tape.constant(x.clone());
    let revision: Vec<Var> = (0..m).map(|_| tape.param(DenseMatrix::identity(f))).collect();
    let classification: Vec<Var> = (0..k).map(|_| tape.param(DenseMatrix::identity(f))).collect();

    let z = gcn_layers(&mut tape, av, xv, &revision, LayerOptions::LINEAR, false, &mut rng)?;
    let opts = SimilarityOptions {
        block_rows: DEFAULT_BLOCK_ROWS,
        symmetrize: false,
    };
    let s = similarity_topk(&mut tape, z, n, opts)?;
    let revised = revise(&mut tape, av, &s)?;
    let out = gcn_layers(&mut tape, revised, xv, &classification, LayerOptions::LINEAR, false, &mut rng)?;
    Ok(tape.dense(out)?.clone())
}

/// Linear propagation `A^k X` expressed as an identity-weight GCN, for
/// checking the layer stack against [`simplified_propagate`].
pub fn linear_gcn_forward(a: &SparseMatrix, x: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let av = tape.sparse_constant(a.clone());
    let xv = tape.constant(x.clone());
    let ws: Vec<Var> = (0..k).map(|_| tape.param(DenseMatrix::identity(x.cols()))).collect();
    let out = gcn_layers(&mut tape, av, xv, &ws, LayerOptions::LINEAR, false, &mut rng)?;
    let got = tape.dense(out)?.clone();
    debug_assert_eq!(got.shape(), simplified_propagate(a, x, k)?.shape());
    Ok(got)
}
