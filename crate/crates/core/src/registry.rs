//! Interchangeable network components looked up by name.
//!
//! The network is assembled from three kinds of block: the encoder block of
//! each stage, the channel attention that follows it, and the fusion that
//! merges a skip connection into the decoder. Every variant (including the
//! ablated ones) registers a factory under a name, and the network config
//! selects variants by those names.

use irdet_tensor::{Real, Var};

use crate::ddc::{DdcBlock, DdcBranches};
use crate::error::{Error, Result};
use crate::lsff::{ConcatFusion, LsffBlock};
use crate::params::{ParamBuilder, Session};
use crate::serank::SeRankBlock;

/// Per-stage construction inputs handed to every factory.
#[derive(Clone, Debug)]
pub struct StageSpec {
    /// 1-based encoder stage number.
    pub index: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub offset_o: i32,
    pub dilations: [usize; 3],
    pub lsff_kernel: usize,
}

pub trait EncoderBlock<T: Real>: Send + Sync {
    fn forward<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>>;
}

pub trait ChannelAttention<T: Real>: Send + Sync {
    fn forward<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>>;
}

pub trait SkipFusion<T: Real>: Send + Sync {
    fn fuse<'t>(&self, s: &Session<'t, T>, enc: Var<'t, T>, dec: Var<'t, T>) -> Result<Var<'t, T>>;
}

pub type EncoderFactory<T> = fn(&mut ParamBuilder<'_, T>, &StageSpec) -> Result<Box<dyn EncoderBlock<T>>>;
pub type AttentionFactory<T> =
    fn(&mut ParamBuilder<'_, T>, &StageSpec) -> Result<Box<dyn ChannelAttention<T>>>;
pub type FusionFactory<T> = fn(&mut ParamBuilder<'_, T>, &StageSpec) -> Result<Box<dyn SkipFusion<T>>>;

/// Name-to-factory table. Registering an existing name replaces it.
#[derive(Clone)]
pub struct Registry<F> {
    kind: &'static str,
    entries: Vec<(String, F)>,
}

impl<F: Copy> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: F) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = factory,
            None => self.entries.push((name.to_string(), factory)),
        }
    }

    pub fn get(&self, name: &str) -> Result<F> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| *f)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

#[derive(Clone)]
pub struct Strategies<T: Real> {
    pub encoders: Registry<EncoderFactory<T>>,
    pub attentions: Registry<AttentionFactory<T>>,
    pub fusions: Registry<FusionFactory<T>>,
}

fn ddc<T: Real>(
    b: &mut ParamBuilder<'_, T>,
    spec: &StageSpec,
    branches: DdcBranches,
) -> Result<Box<dyn EncoderBlock<T>>> {
    Ok(Box::new(DdcBlock::build(b, spec.c_in, spec.c_out, spec.dilations, branches)?))
}

impl<T: Real> Strategies<T> {
    pub fn builtin() -> Self {
        let mut encoders: Registry<EncoderFactory<T>> = Registry::new("encoder block");
        encoders.register("ddc", |b, s| ddc(b, s, DdcBranches::FULL));
        encoders.register("ddc-cdc", |b, s| ddc(b, s, DdcBranches::CENTRAL_DIFFERENCE));
        encoders.register("ddc-dilated", |b, s| ddc(b, s, DdcBranches::DILATED));
        encoders.register("conv", |b, s| ddc(b, s, DdcBranches::PLAIN));

        let mut attentions: Registry<AttentionFactory<T>> = Registry::new("channel attention");
        attentions.register("serank", |b, s| {
            Ok(Box::new(SeRankBlock::build(b, s.c_out, s.offset_o, s.index, true)?))
        });
        attentions.register("serank-nope", |b, s| {
            Ok(Box::new(SeRankBlock::build(b, s.c_out, s.offset_o, s.index, false)?))
        });
        attentions.register("identity", |_, _| Ok(Box::new(Identity)));

        let mut fusions: Registry<FusionFactory<T>> = Registry::new("skip fusion");
        fusions.register("lsff", |b, s| Ok(Box::new(LsffBlock::build(b, s.lsff_kernel)?)));
        fusions.register("concat", |b, s| Ok(Box::new(ConcatFusion::build(b, s.c_out)?)));

        Self {
            encoders,
            attentions,
            fusions,
        }
    }
}

/// Pass-through attention.
pub struct Identity;

impl<T: Real> ChannelAttention<T> for Identity {
    fn forward<'t>(&self, _: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x)
    }
}
