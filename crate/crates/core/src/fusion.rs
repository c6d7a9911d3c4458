//! Alignment of disease features to the regional grid and the fusion
//! strategies compared in the ablation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, MhaBlock, ParamId, ParamStore};

/// Which features reach the decoder prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// Regional features only; the disease branch is skipped.
    None,
    /// Aligned disease features only.
    Disease,
    Average,
    Element,
    Modality,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::None => "none",
            FusionStrategy::Disease => "disease",
            FusionStrategy::Average => "average",
            FusionStrategy::Element => "element",
            FusionStrategy::Modality => "modality",
        }
    }

    pub fn uses_disease_branch(self) -> bool {
        self != FusionStrategy::None
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "disease" => Ok(Self::Disease),
            "average" => Ok(Self::Average),
            "element" => Ok(Self::Element),
            "modality" => Ok(Self::Modality),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

fn same_shape<T: Real>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Element-wise gate `sigmoid([Z_v ; Z~_g] W^g)` of shape `S x d_v`.
#[derive(Clone, Debug)]
pub struct GateFusion {
    pub w_gate: ParamId,
}

impl GateFusion {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        Self {
            w_gate: store.uniform("fusion.gate.w", &[2 * dim, dim], 2 * dim, rng),
        }
    }

    pub fn gate<'t, T: Real>(&self, p: &Bound<'t, T>, z_v: Var<'t, T>, z_g: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("element_fuse", z_v, z_g)?;
        Ok(concat(&[z_v, z_g], 1)?.matmul(p[self.w_gate])?.sigmoid())
    }

    /// `gate * Z_v + (1 - gate) * Z~_g`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, z_v: Var<'t, T>, z_g: Var<'t, T>) -> Result<Var<'t, T>> {
        let gate = self.gate(p, z_v, z_g)?;
        let complement = gate.affine(-T::one(), T::one());
        gate.mul(z_v)?.add(complement.mul(z_g)?)
    }
}

/// Two experts (linear + layer norm) weighted by a soft router that sees the
/// mean-pooled streams and emits one probability pair per image.
#[derive(Clone, Debug)]
pub struct MoeFusion {
    pub visual_expert: Linear,
    pub visual_norm: LayerNorm,
    pub disease_expert: Linear,
    pub disease_norm: LayerNorm,
    pub router_hidden: Linear,
    pub router_out: Linear,
}

impl MoeFusion {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        Self {
            visual_expert: Linear::new(store, "fusion.moe.expert_visual", dim, dim, true, rng),
            visual_norm: LayerNorm::new(store, "fusion.moe.expert_visual_ln", dim),
            disease_expert: Linear::new(store, "fusion.moe.expert_disease", dim, dim, true, rng),
            disease_norm: LayerNorm::new(store, "fusion.moe.expert_disease_ln", dim),
            router_hidden: Linear::new(store, "fusion.moe.router_hidden", 2 * dim, dim, true, rng),
            router_out: Linear::new(store, "fusion.moe.router_out", dim, 2, true, rng),
        }
    }

    /// Router probabilities `[g1, g2]` as a `1 x 2` tensor.
    pub fn route<'t, T: Real>(&self, p: &Bound<'t, T>, z_v: Var<'t, T>, z_g: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("modality_fuse", z_v, z_g)?;
        let pooled = concat(&[z_v.mean_rows()?, z_g.mean_rows()?], 1)?;
        let hidden = self.router_hidden.forward(p, pooled)?.gelu();
        self.router_out.forward(p, hidden)?.softmax(1)
    }

    pub fn experts<'t, T: Real>(&self, p: &Bound<'t, T>, z_v: Var<'t, T>, z_g: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        same_shape("modality_fuse", z_v, z_g)?;
        let e1 = self.visual_norm.forward(p, self.visual_expert.forward(p, z_v)?)?;
        let e2 = self.disease_norm.forward(p, self.disease_expert.forward(p, z_g)?)?;
        Ok((e1, e2))
    }

    /// `g1 E1(Z_v) + g2 E2(Z~_g)` for given router weights.
    pub fn combine<'t, T: Real>(e1: Var<'t, T>, e2: Var<'t, T>, weights: Var<'t, T>) -> Result<Var<'t, T>> {
        let g1 = weights.narrow(1, 0, 1)?;
        let g2 = weights.narrow(1, 1, 1)?;
        e1.scale_by(g1)?.add(e2.scale_by(g2)?)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, z_v: Var<'t, T>, z_g: Var<'t, T>) -> Result<Var<'t, T>> {
        let weights = self.route(p, z_v, z_g)?;
        let (e1, e2) = self.experts(p, z_v, z_g)?;
        Self::combine(e1, e2, weights)
    }
}

/// `(Z_v + Z~_g) / 2`.
pub fn average_fuse<'t, T: Real>(z_v: Var<'t, T>, z_g: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("average_fuse", z_v, z_g)?;
    Ok(z_v.add(z_g)?.scale(T::lit(0.5)))
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub align: MhaBlock,
    pub gate: GateFusion,
    pub moe: MoeFusion,
}

impl FusionModule {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            align: MhaBlock::new(store, "fusion.align", dim, dim, dim, heads, rng)?,
            gate: GateFusion::new(store, dim, rng),
            moe: MoeFusion::new(store, dim, rng),
        })
    }

    /// `Z~_g = MHA(Z_v, Z_g, Z_g)`, shaped like `Z_v`.
    pub fn align<'t, T: Real>(&self, p: &Bound<'t, T>, z_v: Var<'t, T>, z_g: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.align.forward(p, z_v, z_g, false)?.output)
    }

    /// Combines `Z_v` with the aligned disease features. `aligned` may be
    /// `None` only for [`FusionStrategy::None`].
    pub fn fuse<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        strategy: FusionStrategy,
        z_v: Var<'t, T>,
        aligned: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let need = || aligned.ok_or_else(|| Error::Invalid(format!("fusion {strategy} needs disease features")));
        match strategy {
            FusionStrategy::None => Ok(z_v),
            FusionStrategy::Disease => need(),
            FusionStrategy::Average => average_fuse(z_v, need()?),
            FusionStrategy::Element => self.gate.forward(p, z_v, need()?),
            FusionStrategy::Modality => self.moe.forward(p, z_v, need()?),
        }
    }
}
