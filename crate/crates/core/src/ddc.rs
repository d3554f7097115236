//! Three-branch encoder block: a standard 3×3 conv, a central-difference 3×3
//! conv and a chain of three dilated 3×3 convs, concatenated along channels
//! and merged by a 1×1 conv.

use irdet_tensor::{ConvGeometry, Real, Tensor, Var};

use crate::error::{invalid, Result};
use crate::params::{Conv2d, ConvUnit, ParamBuilder, ParamStore, Session};
use crate::registry::EncoderBlock;

/// Which branches a block carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DdcBranches {
    pub standard: bool,
    pub central_difference: bool,
    pub dilated: bool,
}

impl DdcBranches {
    pub const FULL: Self = Self {
        standard: true,
        central_difference: true,
        dilated: true,
    };
    pub const CENTRAL_DIFFERENCE: Self = Self {
        standard: true,
        central_difference: true,
        dilated: false,
    };
    pub const DILATED: Self = Self {
        standard: true,
        central_difference: false,
        dilated: true,
    };
    pub const PLAIN: Self = Self {
        standard: true,
        central_difference: false,
        dilated: false,
    };

    pub fn count(self) -> usize {
        [self.standard, self.central_difference, self.dilated]
            .iter()
            .filter(|&&on| on)
            .count()
    }
}

#[derive(Clone, Debug)]
pub struct DdcBlock {
    pub standard: Option<ConvUnit>,
    pub central_difference: Option<ConvUnit>,
    pub dilated: Option<Vec<ConvUnit>>,
    pub merge: Conv2d,
    pub c_out: usize,
}

impl DdcBlock {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        dilations: [usize; 3],
        branches: DdcBranches,
    ) -> Result<Self> {
        if branches.count() == 0 {
            return Err(invalid("DdcBlock::build", "every branch is disabled"));
        }
        let same3 = ConvGeometry::same(3, 1);
        let standard = if branches.standard {
            Some(b.conv_unit("standard", c_in, c_out, 3, same3, false)?)
        } else {
            None
        };
        let central_difference = if branches.central_difference {
            Some(b.conv_unit("central_difference", c_in, c_out, 3, same3, true)?)
        } else {
            None
        };
        let dilated = if branches.dilated {
            let mut chain = Vec::with_capacity(3);
            for (j, &d) in dilations.iter().enumerate() {
                let c = if j == 0 { c_in } else { c_out };
                chain.push(b.conv_unit(&format!("dilated{j}"), c, c_out, 3, ConvGeometry::same(3, d), false)?);
            }
            Some(chain)
        } else {
            None
        };
        let merge = b.conv("merge", branches.count() * c_out, c_out, 1, ConvGeometry::default(), true)?;
        Ok(Self {
            standard,
            central_difference,
            dilated,
            merge,
            c_out,
        })
    }

    pub fn branches(&self) -> DdcBranches {
        DdcBranches {
            standard: self.standard.is_some(),
            central_difference: self.central_difference.is_some(),
            dilated: self.dilated.is_some(),
        }
    }

    /// Branch outputs in merge order: standard, central-difference, dilated.
    pub fn branch_outputs<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut out = Vec::with_capacity(3);
        if let Some(u) = &self.standard {
            out.push(u.forward(s, x)?);
        }
        if let Some(u) = &self.central_difference {
            out.push(u.forward(s, x)?);
        }
        if let Some(chain) = &self.dilated {
            let mut y = x;
            for u in chain {
                y = u.forward(s, y)?;
            }
            out.push(y);
        }
        Ok(out)
    }

    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let parts = self.branch_outputs(s, x)?;
        let merged = if parts.len() == 1 {
            parts[0]
        } else {
            Var::concat(&parts, 1)?
        };
        self.merge.forward(s, merged)
    }
}

impl<T: Real> EncoderBlock<T> for DdcBlock {
    fn forward<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        DdcBlock::forward(self, s, x)
    }
}

/// Drops the disabled branches of `block`. The merge conv keeps the weight
/// columns of the surviving branches, stored as a new parameter; branches
/// cannot be switched back on.
pub fn ddc_ablate<T: Real>(block: &DdcBlock, keep: DdcBranches, store: &mut ParamStore<T>) -> Result<DdcBlock> {
    let have = block.branches();
    if keep.count() == 0 {
        return Err(invalid("ddc_ablate", "every branch is disabled"));
    }
    let flags = [
        (have.standard, keep.standard),
        (have.central_difference, keep.central_difference),
        (have.dilated, keep.dilated),
    ];
    if flags.iter().any(|&(h, k)| k && !h) {
        return Err(invalid("ddc_ablate", "cannot enable a branch the block does not have"));
    }
    let c = block.c_out;
    let present: Vec<bool> = flags.iter().filter(|(h, _)| *h).map(|&(_, k)| k).collect();
    let old = store.get(block.merge.weight).clone();
    let groups_in = present.len();
    let mut data = Vec::with_capacity(c * keep.count() * c);
    for o in 0..c {
        let row = &old.data()[o * groups_in * c..(o + 1) * groups_in * c];
        for (g, &kept) in present.iter().enumerate() {
            if kept {
                data.extend_from_slice(&row[g * c..(g + 1) * c]);
            }
        }
    }
    let name = format!(
        "{}.ablated{}{}{}",
        store.name(block.merge.weight),
        keep.standard as u8,
        keep.central_difference as u8,
        keep.dilated as u8
    );
    let weight = match store.id(&name) {
        Some(id) => {
            store.set(id, Tensor::new(&[c, keep.count() * c, 1, 1], data)?)?;
            id
        }
        None => store.insert(name, Tensor::new(&[c, keep.count() * c, 1, 1], data)?, true)?,
    };
    Ok(DdcBlock {
        standard: block.standard.clone().filter(|_| keep.standard),
        central_difference: block.central_difference.clone().filter(|_| keep.central_difference),
        dilated: block.dilated.clone().filter(|_| keep.dilated),
        merge: Conv2d {
            weight,
            ..block.merge.clone()
        },
        c_out: c,
    })
}
