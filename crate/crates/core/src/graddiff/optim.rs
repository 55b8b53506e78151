//! Gradient descent with the projector kept on the orthogonal manifold.

use crate::dmqa::TokenBank;
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::numerics::{matmul_tn, matmul_unchecked, qr_orthonormalize, Matrix};
use crate::ocnf::{orthogonality_error, OrthoProjector};

use super::{Gradients, ParamSet};

const ORTHOGONAL_PRE_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;

/// One Riemannian step: tangent projection `G − Q·sym(QᵀG)`, Euclidean
/// step, QR retraction.
pub fn retract_projector(q: &Matrix, grad: &Matrix, lr: f64) -> Result<Matrix> {
    if q.rows() != q.cols() || grad.rows() != q.rows() || grad.cols() != q.cols() {
        return Err(Error::contract(
            "retract_projector",
            format!(
                "Q is {}x{}, gradient {}x{}",
                q.rows(),
                q.cols(),
                grad.rows(),
                grad.cols()
            ),
        ));
    }
    let err = orthogonality_error(q);
    if !(err <= ORTHOGONAL_PRE_TOL) {
        return Err(Error::contract(
            "retract_projector",
            format!("Q is not orthogonal (‖QᵀQ − I‖ = {err:e})"),
        ));
    }
    if lr == 0.0 || grad.data().iter().all(|v| *v == 0.0) {
        return Ok(q.clone());
    }
    let qtg = matmul_tn(q, grad);
    let sym = Matrix::from_fn(qtg.rows(), qtg.cols(), |i, j| 0.5 * (qtg[(i, j)] + qtg[(j, i)]));
    let mut tangent = grad.clone();
    tangent.add_scaled(&matmul_unchecked(q, &sym), -1.0);
    let mut step = q.clone();
    step.add_scaled(&tangent, -lr);
    qr_orthonormalize(&step)
}

fn descend(target: &mut [f64], grad: &[f64], lr: f64) {
    for (t, g) in target.iter_mut().zip(grad) {
        *t -= lr * g;
    }
}

fn descend_mlp(mlp: &mut Mlp, grad: &Mlp, lr: f64) {
    for (t, g) in mlp.params_mut().into_iter().zip(grad.params()) {
        descend(t, g, lr);
    }
}

fn check_shapes(params: &ParamSet, grads: &Gradients) -> Result<()> {
    let ok = grads.tokens_r.rows() == params.tokens_r.count()
        && grads.tokens_s.rows() == params.tokens_s.count()
        && grads.tokens_r.cols() == params.channels()
        && grads.tokens_s.cols() == params.channels()
        && grads.projector.rows() == params.projector.joint().rows()
        && grads.probe_weights.rows() == params.probe.weights.rows()
        && grads.probe_weights.cols() == params.probe.weights.cols()
        && grads.probe_bias.len() == params.probe.bias.len()
        && grads.token_mlp.hidden_dim() == params.dmqa.mlp.hidden_dim()
        && grads.fusion_mlp.hidden_dim() == params.fusion.mlp.hidden_dim();
    if ok {
        Ok(())
    } else {
        Err(Error::contract("sgd_step", "gradient shapes do not match parameters"))
    }
}

/// Plain gradient descent on the Euclidean groups; the projector moves along
/// the manifold, halving its step until the retraction succeeds.
pub fn sgd_step(params: &ParamSet, grads: &Gradients, lr: f64) -> Result<ParamSet> {
    check_shapes(params, grads)?;
    let mut next = params.clone();
    if lr == 0.0 {
        return Ok(next);
    }
    for (bank, grad) in [
        (&mut next.tokens_r, &grads.tokens_r),
        (&mut next.tokens_s, &grads.tokens_s),
    ] {
        let mut t = bank.tokens().clone();
        t.add_scaled(grad, -lr);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        *bank = TokenBank::with_iteration(t, 0)?;
    }
    descend_mlp(&mut next.dmqa.mlp, &grads.token_mlp, lr);
    next.dmqa.alpha_raw -= lr * grads.alpha_raw;
    next.dmqa.beta_raw -= lr * grads.beta_raw;
    descend_mlp(&mut next.fusion.mlp, &grads.fusion_mlp, lr);
    descend(next.probe.weights.data_mut(), grads.probe_weights.data(), lr);
    descend(&mut next.probe.bias, &grads.probe_bias, lr);

    let mut step = lr;
    let mut halvings = 0;
    let joint = loop {
        match retract_projector(params.projector.joint(), &grads.projector, step) {
            Ok(q) => break q,
            Err(Error::DegenerateInput { .. }) if halvings < MAX_HALVINGS => {
                step *= 0.5;
                halvings += 1;
            }
            Err(e) => return Err(e),
        }
    };
    if !joint.is_finite() {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    next.projector = OrthoProjector::from_joint(joint)?;
    if !next.is_finite() {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    Ok(next)
}
