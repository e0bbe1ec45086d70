//! Mesh-recovery regression targets and loss.
//!
//! The body model itself is an opaque external asset: this module only sees
//! its outputs as tensors (shape coefficients, pose parameters, joints, and
//! optionally a vertex mesh plus a joint regression matrix).

use crate::ops;
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Loss weights: shape, pose, joints.
pub const W_BETA: Real = 0.01;
pub const W_THETA: Real = 0.01;
pub const W_JOINTS: Real = 1.0;

/// One side (prediction or ground truth) of the regression targets.
#[derive(Debug, Clone)]
pub struct HmrTargets {
    /// Shape coefficients, conventionally length 10.
    pub beta: Tensor,
    /// Pose parameters.
    pub theta: Tensor,
    /// Joints `[k, 3]`.
    pub joints: Tensor,
}

impl HmrTargets {
    fn check_match(&self, other: &HmrTargets) -> Result<()> {
        for (name, a, b) in [
            ("beta", &self.beta, &other.beta),
            ("theta", &self.theta, &other.theta),
            ("joints", &self.joints, &other.joints),
        ] {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{name} shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Joint regression: J = W_reg . M, with W_reg `[k, Nv]` and mesh `[Nv, 3]`.
pub fn regress_joints(w_reg: &Tensor, mesh: &Tensor) -> Result<Tensor> {
    if w_reg.rank() != 2 || mesh.rank() != 2 || mesh.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "joint regression expects [k, Nv] x [Nv, 3], got {:?} x {:?}",
            w_reg.shape(),
            mesh.shape()
        )));
    }
    ops::matmul(w_reg, mesh)
}

/// Tape version of `regress_joints`, for differentiating through the mesh.
pub fn regress_joints_on(tape: &mut Tape, w_reg: VarId, mesh: VarId) -> Result<VarId> {
    tape.matmul(w_reg, mesh)
}

fn sum_squared_diff(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq))
}

/// Weighted regression loss on the tape:
/// w1 ssq(beta - beta*) + w2 ssq(theta - theta*) + w3 ssq(J - J*),
/// where ssq is the sum of squared elementwise differences.
pub fn hmr_loss_on(
    tape: &mut Tape,
    pred: (VarId, VarId, VarId),
    gt: (VarId, VarId, VarId),
) -> Result<VarId> {
    let lb = sum_squared_diff(tape, pred.0, gt.0)?;
    let lt = sum_squared_diff(tape, pred.1, gt.1)?;
    let lj = sum_squared_diff(tape, pred.2, gt.2)?;
    let lb = tape.scale(lb, W_BETA);
    let lt = tape.scale(lt, W_THETA);
    let lj = tape.scale(lj, W_JOINTS);
    let partial = tape.add(lb, lt)?;
    tape.add(partial, lj)
}

/// Scalar value of the regression loss.
pub fn hmr_loss(pred: &HmrTargets, gt: &HmrTargets) -> Result<Real> {
    pred.check_match(gt)?;
    let mut tape = Tape::new();
    let p = (
        tape.constant(pred.beta.clone()),
        tape.constant(pred.theta.clone()),
        tape.constant(pred.joints.clone()),
    );
    let g = (
        tape.constant(gt.beta.clone()),
        tape.constant(gt.theta.clone()),
        tape.constant(gt.joints.clone()),
    );
    let loss = hmr_loss_on(&mut tape, p, g)?;
    Ok(tape.value(loss).item())
}
