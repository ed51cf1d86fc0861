//! Dual-branch relation model: one shared feature extractor feeding a
//! coarse branch (CLB) and a fine branch (FLB) decoder, each adding the
//! frozen subject/object prior bias.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{PriorBias, RelationInstance};
use crate::error::{Error, Result};
use crate::numerics::{
    linear_backward, linear_backward_params, linear_forward, relu, GradStore, ParamStore, Tensor,
};
use crate::scm::{self, EmbeddingTable, GroundTruth, ScmInput, ScmOutput};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

pub const EXT_L1_W: &str = "ext.l1.w";
pub const EXT_L1_B: &str = "ext.l1.b";
pub const EXT_L2_W: &str = "ext.l2.w";
pub const EXT_L2_B: &str = "ext.l2.b";

/// Seed offset separating the embedding table stream from parameter init.
const EMBEDDING_SEED_SALT: u64 = 0x5eed_e0b0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Clb,
    Flb,
}

impl Branch {
    pub fn weight_name(self) -> &'static str {
        match self {
            Branch::Clb => "dec.clb.w",
            Branch::Flb => "dec.flb.w",
        }
    }

    pub fn bias_name(self) -> &'static str {
        match self {
            Branch::Clb => "dec.clb.b",
            Branch::Flb => "dec.flb.b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub num_object_classes: usize,
    /// Foreground predicates `N_R`.
    pub num_predicates: usize,
    pub hidden_dim: usize,
    pub scm_dim: usize,
}

impl ModelDims {
    pub fn num_classes(&self) -> usize {
        self.num_predicates + 1
    }

    pub fn object_slots(&self) -> usize {
        self.num_object_classes + 1
    }

    pub fn input_dim(&self) -> usize {
        3 * self.feature_dim + 2 * self.object_slots()
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.scm_dim == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        if self.num_predicates == 0 || self.num_object_classes == 0 {
            return Err(Error::config("model needs predicates and object classes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchModel {
    pub dims: ModelDims,
    pub params: ParamStore,
    pub prior: PriorBias,
    pub embeddings: EmbeddingTable,
    /// Branch used by [`DualBranchModel::predict_image`].
    pub inference_branch: Branch,
    /// Whether inference applies the semantic context correction.
    pub scm_enabled: bool,
}

/// Activations of the extractor for one relation.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
}

/// FLB output for one image.
#[derive(Debug, Clone)]
pub struct FlbOutput {
    pub z_f: Tensor,
    pub z_o: Tensor,
    pub l_sc: f64,
    pub scm: Option<ScmOutput>,
}

impl DualBranchModel {
    pub fn new(dims: ModelDims, prior: PriorBias, seed: u64) -> Result<Self> {
        dims.validate()?;
        if prior.object_slots() != dims.object_slots() || prior.num_classes() != dims.num_classes()
        {
            return Err(Error::invalid("prior bias shape does not match model dims"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, c) = (dims.hidden_dim, dims.num_classes());
        params.insert(EXT_L1_W, crate::numerics::xavier_uniform(&mut rng, h, dims.input_dim()))?;
        params.insert(EXT_L1_B, Tensor::zeros(&[h]))?;
        params.insert(EXT_L2_W, crate::numerics::xavier_uniform(&mut rng, h, h))?;
        params.insert(EXT_L2_B, Tensor::zeros(&[h]))?;
        for branch in [Branch::Clb, Branch::Flb] {
            params.insert(branch.weight_name(), crate::numerics::xavier_uniform(&mut rng, c, h))?;
            params.insert(branch.bias_name(), Tensor::zeros(&[c]))?;
        }
        scm::init_scm_params(&mut params, &mut rng, dims.scm_dim, c)?;
        let embeddings =
            EmbeddingTable::random(seed ^ EMBEDDING_SEED_SALT, c, dims.object_slots());
        Ok(Self {
            dims,
            params,
            prior,
            embeddings,
            inference_branch: Branch::Flb,
            scm_enabled: true,
        })
    }

    fn input_vector(&self, inst: &RelationInstance) -> Result<Vec<f64>> {
        let fd = self.dims.feature_dim;
        let ld = self.dims.object_slots();
        if inst.subject_feature.len() != fd
            || inst.object_feature.len() != fd
            || inst.union_feature.len() != fd
            || inst.subject_label_dist.len() != ld
            || inst.object_label_dist.len() != ld
        {
            return Err(Error::invalid(format!(
                "instance dimensions do not match model (feature_dim {fd}, label width {ld})"
            )));
        }
        let mut x = Vec::with_capacity(self.dims.input_dim());
        x.extend_from_slice(&inst.subject_feature);
        x.extend_from_slice(&inst.object_feature);
        x.extend_from_slice(&inst.union_feature);
        x.extend_from_slice(&inst.subject_label_dist);
        x.extend_from_slice(&inst.object_label_dist);
        Ok(x)
    }

    /// Shared context vector; both branches read this same computation.
    pub fn extract_features(&self, inst: &RelationInstance) -> Result<Vec<f64>> {
        Ok(self.extract_with_cache(inst)?.0)
    }

    pub fn extract_with_cache(
        &self,
        inst: &RelationInstance,
    ) -> Result<(Vec<f64>, ExtractorCache)> {
        let input = self.input_vector(inst)?;
        let p = &self.params;
        let pre1 = linear_forward(p.value(EXT_L1_W), Some(p.value(EXT_L1_B)), &input);
        let mut hidden = pre1.clone();
        relu(&mut hidden);
        let ctx = linear_forward(p.value(EXT_L2_W), Some(p.value(EXT_L2_B)), &hidden);
        Ok((ctx, ExtractorCache { input, pre1, hidden }))
    }

    /// Layer-1 pre-activation, exposed for inspection.
    pub fn first_layer_preactivation(&self, inst: &RelationInstance) -> Result<Vec<f64>> {
        Ok(self.extract_with_cache(inst)?.1.pre1)
    }

    pub fn extractor_backward(&self, cache: &ExtractorCache, d_ctx: &[f64], grads: &mut GradStore) {
        let p = &self.params;
        let (gw, gb) = grads.pair_mut(EXT_L2_W, EXT_L2_B);
        let mut d_hidden = linear_backward(p.value(EXT_L2_W), &cache.hidden, d_ctx, gw, Some(gb));
        for (g, z) in d_hidden.iter_mut().zip(&cache.pre1) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        let (gw, gb) = grads.pair_mut(EXT_L1_W, EXT_L1_B);
        linear_backward_params(&cache.input, &d_hidden, gw, Some(gb));
    }

    /// Branch logits: linear map of the context plus the pair's prior slice.
    pub fn decode(
        &self,
        branch: Branch,
        context: &[f64],
        subject_class: usize,
        object_class: usize,
    ) -> Result<Vec<f64>> {
        if context.len() != self.dims.hidden_dim {
            return Err(Error::invalid(format!(
                "context width {} differs from hidden_dim {}",
                context.len(),
                self.dims.hidden_dim
            )));
        }
        let prior = self.prior.slice(subject_class, object_class)?;
        let mut z = linear_forward(
            self.params.value(branch.weight_name()),
            Some(self.params.value(branch.bias_name())),
            context,
        );
        for (a, b) in z.iter_mut().zip(prior) {
            *a += b;
        }
        Ok(z)
    }

    /// Accumulates decoder gradients and returns `dL/dcontext`.
    pub fn decode_backward(
        &self,
        branch: Branch,
        context: &[f64],
        d_logits: &[f64],
        grads: &mut GradStore,
    ) -> Vec<f64> {
        let (gw, gb) = grads.pair_mut(branch.weight_name(), branch.bias_name());
        linear_backward(
            self.params.value(branch.weight_name()),
            context,
            d_logits,
            gw,
            Some(gb),
        )
    }

    /// Fine-branch logits for one image, corrected by the semantic context
    /// module unless `use_scm` is false. Ground truth (training only) also
    /// yields the semantic-gap loss.
    pub fn flb_forward(
        &self,
        instances: &[RelationInstance],
        use_scm: bool,
        with_ground_truth: bool,
        keep_cache: bool,
    ) -> Result<FlbOutput> {
        if instances.is_empty() {
            return Err(Error::invalid("an image needs at least one relation"));
        }
        let c = self.dims.num_classes();
        let mut z_f = Tensor::zeros(&[instances.len(), c]);
        for (i, inst) in instances.iter().enumerate() {
            let ctx = self.extract_features(inst)?;
            let z = self.decode(Branch::Flb, &ctx, inst.subject_class, inst.object_class)?;
            z_f.row_mut(i).copy_from_slice(&z);
        }
        self.flb_correct(instances, z_f, use_scm, with_ground_truth, keep_cache)
    }

    /// Applies the semantic context correction to precomputed fine logits.
    pub fn flb_correct(
        &self,
        instances: &[RelationInstance],
        z_f: Tensor,
        use_scm: bool,
        with_ground_truth: bool,
        keep_cache: bool,
    ) -> Result<FlbOutput> {
        if !use_scm {
            return Ok(FlbOutput {
                z_o: z_f.clone(),
                z_f,
                l_sc: 0.0,
                scm: None,
            });
        }
        let subj: Vec<&[f64]> = instances.iter().map(|r| r.subject_label_dist.as_slice()).collect();
        let obj: Vec<&[f64]> = instances.iter().map(|r| r.object_label_dist.as_slice()).collect();
        let preds: Vec<usize> = instances.iter().map(|r| r.gt_predicate).collect();
        let subjects: Vec<usize> = instances.iter().map(|r| r.subject_class).collect();
        let objects: Vec<usize> = instances.iter().map(|r| r.object_class).collect();
        let input = ScmInput {
            z_f: &z_f,
            subject_dists: &subj,
            object_dists: &obj,
            ground_truth: with_ground_truth.then_some(GroundTruth {
                predicates: &preds,
                subjects: &subjects,
                objects: &objects,
            }),
        };
        let out = scm::scm_forward(&input, &self.embeddings, &self.params, keep_cache)?;
        let mut z_o = z_f.clone();
        z_o.add_assign(&out.z_tilde);
        Ok(FlbOutput {
            z_f,
            z_o,
            l_sc: out.l_sc,
            scm: Some(out),
        })
    }

    /// Inference logits for one image using the configured branch.
    pub fn predict_image(&self, instances: &[RelationInstance]) -> Result<Tensor> {
        match self.inference_branch {
            Branch::Flb => Ok(self
                .flb_forward(instances, self.scm_enabled, false, false)?
                .z_o),
            Branch::Clb => {
                let c = self.dims.num_classes();
                let mut z = Tensor::zeros(&[instances.len(), c]);
                for (i, inst) in instances.iter().enumerate() {
                    let ctx = self.extract_features(inst)?;
                    let row = self.decode(Branch::Clb, &ctx, inst.subject_class, inst.object_class)?;
                    z.row_mut(i).copy_from_slice(&row);
                }
                Ok(z)
            }
        }
    }
}
