//! Multi-scale cross module: two conv-BN-LeakyReLU-conv-BN branches with
//! different kernel sizes, coupled by the merge-and-run mapping. The branch
//! output and the input average are summed before the final activation.

use super::{ConvBnUnit, UnitCache};
use crate::error::{Error, Result};
use crate::numerics::{check_same, leaky_relu, leaky_relu_backward, merge_and_run_backward, merge_and_run_map, Mode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MscModule {
    /// Kernel `k1`.
    pub branch1: [ConvBnUnit; 2],
    /// Kernel `k2`.
    pub branch2: [ConvBnUnit; 2],
}

#[derive(Clone, Debug)]
struct BranchCache {
    first: UnitCache,
    first_pre: Tensor,
    second: UnitCache,
}

#[derive(Clone, Debug)]
pub struct MscCache {
    b1: BranchCache,
    b2: BranchCache,
    sum1: Tensor,
    sum2: Tensor,
}

#[derive(Clone, Debug)]
pub struct MscLastCache {
    b1: BranchCache,
    b2: BranchCache,
    sum: Tensor,
}

fn branch_forward(
    units: &[ConvBnUnit; 2],
    x: &Tensor,
    slope: f64,
    mode: Mode,
) -> Result<(Tensor, Option<BranchCache>)> {
    let (first_pre, first) = units[0].forward(x, mode)?;
    let a = leaky_relu(&first_pre, slope);
    let (h, second) = units[1].forward(&a, mode)?;
    let cache = match (first, second) {
        (Some(first), Some(second)) => Some(BranchCache {
            first,
            first_pre,
            second,
        }),
        _ => None,
    };
    Ok((h, cache))
}

fn branch_backward(
    units: &[ConvBnUnit; 2],
    cache: &BranchCache,
    grad: &Tensor,
    slope: f64,
    acc: &mut [ConvBnUnit; 2],
) -> Result<Tensor> {
    let ga = units[1].backward(&cache.second, grad, &mut acc[1])?;
    let g_pre = leaky_relu_backward(&cache.first_pre, slope, &ga)?;
    units[0].backward(&cache.first, &g_pre, &mut acc[0])
}

impl MscModule {
    pub fn zeros(channels: usize, k1: usize, k2: usize) -> Result<Self> {
        let unit = |k| ConvBnUnit::zeros(channels, channels, k);
        Ok(MscModule {
            branch1: [unit(k1)?, unit(k1)?],
            branch2: [unit(k2)?, unit(k2)?],
        })
    }

    pub fn width(&self) -> usize {
        self.branch1[0].conv.in_channels()
    }

    fn check_inputs(&self, x1: &Tensor, x2: &Tensor) -> Result<()> {
        check_same(x1.shape(), x2.shape(), "msc_forward")?;
        if x1.shape().c != self.width() {
            return Err(Error::invalid(format!(
                "MSC module of width {} got input {}",
                self.width(),
                x1.shape()
            )));
        }
        Ok(())
    }

    /// `y_i = LeakyReLU(H^bi(x_i) + (x1 + x2) / 2)` for both branches.
    pub fn forward(&self, x1: &Tensor, x2: &Tensor, slope: f64, mode: Mode) -> Result<(Tensor, Tensor, Option<MscCache>)> {
        self.check_inputs(x1, x2)?;
        let (h1, b1) = branch_forward(&self.branch1, x1, slope, mode)?;
        let (h2, b2) = branch_forward(&self.branch2, x2, slope, mode)?;
        let (m1, m2) = merge_and_run_map(x1, x2)?;
        let sum1 = h1.add(&m1)?;
        let sum2 = h2.add(&m2)?;
        let y1 = leaky_relu(&sum1, slope);
        let y2 = leaky_relu(&sum2, slope);
        let cache = match (b1, b2) {
            (Some(b1), Some(b2)) => Some(MscCache { b1, b2, sum1, sum2 }),
            _ => None,
        };
        Ok((y1, y2, cache))
    }

    pub fn backward(
        &self,
        cache: &MscCache,
        grad1: &Tensor,
        grad2: &Tensor,
        slope: f64,
        acc: &mut MscModule,
    ) -> Result<(Tensor, Tensor)> {
        let gs1 = leaky_relu_backward(&cache.sum1, slope, grad1)?;
        let gs2 = leaky_relu_backward(&cache.sum2, slope, grad2)?;
        let mut gx1 = branch_backward(&self.branch1, &cache.b1, &gs1, slope, &mut acc.branch1)?;
        let mut gx2 = branch_backward(&self.branch2, &cache.b2, &gs2, slope, &mut acc.branch2)?;
        let (ga, gb) = merge_and_run_backward(&gs1, &gs2)?;
        gx1.add_assign(&ga)?;
        gx2.add_assign(&gb)?;
        Ok((gx1, gx2))
    }

    /// Closing module of a stage:
    /// `y = LeakyReLU(H^b1(x1) + H^b2(x2) + (x1 + x2) / 2)`.
    pub fn last_forward(&self, x1: &Tensor, x2: &Tensor, slope: f64, mode: Mode) -> Result<(Tensor, Option<MscLastCache>)> {
        self.check_inputs(x1, x2)?;
        let (h1, b1) = branch_forward(&self.branch1, x1, slope, mode)?;
        let (h2, b2) = branch_forward(&self.branch2, x2, slope, mode)?;
        let (m, _) = merge_and_run_map(x1, x2)?;
        let sum = h1.add(&h2)?.add(&m)?;
        let y = leaky_relu(&sum, slope);
        let cache = match (b1, b2) {
            (Some(b1), Some(b2)) => Some(MscLastCache { b1, b2, sum }),
            _ => None,
        };
        Ok((y, cache))
    }

    pub fn last_backward(
        &self,
        cache: &MscLastCache,
        grad: &Tensor,
        slope: f64,
        acc: &mut MscModule,
    ) -> Result<(Tensor, Tensor)> {
        let gs = leaky_relu_backward(&cache.sum, slope, grad)?;
        let mut gx1 = branch_backward(&self.branch1, &cache.b1, &gs, slope, &mut acc.branch1)?;
        let mut gx2 = branch_backward(&self.branch2, &cache.b2, &gs, slope, &mut acc.branch2)?;
        let half = gs.scale(0.5);
        gx1.add_assign(&half)?;
        gx2.add_assign(&half)?;
        Ok((gx1, gx2))
    }

    pub(super) fn commit(&mut self, cache: &MscCache) {
        commit_branch(&mut self.branch1, &cache.b1);
        commit_branch(&mut self.branch2, &cache.b2);
    }

    pub(super) fn commit_last(&mut self, cache: &MscLastCache) {
        commit_branch(&mut self.branch1, &cache.b1);
        commit_branch(&mut self.branch2, &cache.b2);
    }
}

fn commit_branch(units: &mut [ConvBnUnit; 2], cache: &BranchCache) {
    units[0].commit(&cache.first);
    units[1].commit(&cache.second);
}
