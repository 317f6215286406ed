use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Channel-wise equivalent transformation: activations become
/// `(x − delta) / s` while the next linear layer absorbs the inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LetParams {
    pub delta: Tensor,
    /// Strictly positive.
    pub s: Tensor,
}

/// Tape handles for [`LetParams`]. The optimiser works on `log_s` so the
/// scale stays positive; `s = exp(log_s)`.
#[derive(Debug, Clone, Copy)]
pub struct LetVars<'t> {
    pub delta: Var<'t>,
    pub log_s: Var<'t>,
    pub s: Var<'t>,
}

impl LetParams {
    pub fn identity(d: usize) -> Self {
        Self {
            delta: Tensor::zeros(&[d]),
            s: Tensor::full(&[d], 1.0),
        }
    }

    pub fn new(delta: Tensor, s: Tensor) -> Result<Self> {
        let p = Self { delta, s };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.delta.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta.rank() != 1 || self.delta.shape() != self.s.shape() {
            return Err(Error::Shape(format!(
                "LET shift {:?} and scale {:?} must be equal-length vectors",
                self.delta.shape(),
                self.s.shape()
            )));
        }
        if self.s.data().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain {
                op: "let_transform",
                msg: "scales must be strictly positive".into(),
            });
        }
        Ok(())
    }

    fn to_vars<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<LetVars<'t>> {
        self.validate()?;
        let log_s = self.s.map(f64::ln);
        let (delta, log_s) = if trainable {
            (tape.param(self.delta.clone()), tape.param(log_s))
        } else {
            (tape.constant(self.delta.clone()), tape.constant(log_s))
        };
        // frozen scales are used verbatim so a round trip through ln/exp
        // cannot perturb them
        let s = if trainable {
            log_s.exp()?
        } else {
            tape.constant(self.s.clone())
        };
        Ok(LetVars { delta, log_s, s })
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> Result<LetVars<'t>> {
        self.to_vars(tape, false)
    }

    pub fn vars_trainable<'t>(&self, tape: &'t Tape) -> Result<LetVars<'t>> {
        self.to_vars(tape, true)
    }
}

/// Output of [`let_transform`].
#[derive(Debug, Clone, Copy)]
pub struct LetOutputs<'t> {
    pub x: Var<'t>,
    pub w: Var<'t>,
    pub bias: Var<'t>,
}

/// `x̃ = (x − δ)/s`, `w̃ = diag(s)·w`, `b̃ = b + δ·w`, so that
/// `x̃·w̃ + b̃ = x·w + b` exactly in real arithmetic.
///
/// Shapes: `x [N×d]`, `w [d×m]`, `bias [m]`, `δ, s [d]`.
pub fn let_transform<'t>(
    x: Var<'t>,
    w: Var<'t>,
    bias: Var<'t>,
    params: &LetVars<'t>,
) -> Result<LetOutputs<'t>> {
    let (xs, ws, bs) = (x.shape(), w.shape(), bias.shape());
    let d = params.delta.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] || d != [ws[0]] {
        return Err(Error::Shape(format!(
            "let_transform shapes x {xs:?}, w {ws:?}, bias {bs:?}, delta {d:?} disagree"
        )));
    }
    if params.s.value().data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain {
            op: "let_transform",
            msg: "scales must be strictly positive".into(),
        });
    }
    let (din, m) = (ws[0], ws[1]);
    let x_t = x.sub(params.delta)?.div(params.s)?;
    let w_t = w.mul(params.s.reshape(&[din, 1])?)?;
    let shift = params.delta.reshape(&[1, din])?.matmul(w)?.reshape(&[m])?;
    let bias_t = bias.add(shift)?;
    Ok(LetOutputs {
        x: x_t,
        w: w_t,
        bias: bias_t,
    })
}

/// Token-level normalisation applied ahead of the channel-wise transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierLetState {
    /// Floor on the per-token scale.
    pub epsilon: f64,
}

impl Default for HierLetState {
    fn default() -> Self {
        Self { epsilon: 1e-6 }
    }
}

/// Per-token scale `s_tok = max(sqrt(Var_channels(x)), ε)` (population
/// variance) and the row-normalised activations `x / s_tok`.
pub fn hier_let_token_scale<'t>(x: Var<'t>, state: &HierLetState) -> Result<(Var<'t>, Var<'t>)> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::Shape(format!("token scaling expects [N×d] with d >= 1, got {shape:?}")));
    }
    if !(state.epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    // max(sqrt(v), ε) == sqrt(max(v, ε²)); clamping first keeps the sqrt
    // gradient finite on constant rows
    let s_tok = x
        .variance_axis(1)?
        .clamp_min(state.epsilon * state.epsilon)?
        .sqrt()?;
    let x1 = x.div(s_tok.reshape(&[shape[0], 1])?)?;
    Ok((x1, s_tok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::population_variance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn identity_params_are_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, w, b) = (random(&mut rng, &[3, 4], -1.0, 1.0), random(&mut rng, &[4, 2], -1.0, 1.0), random(&mut rng, &[2], -1.0, 1.0));
        let p = LetParams::identity(4).constants(&tape).unwrap();
        let out = let_transform(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()), &p).unwrap();
        assert_eq!(out.x.value(), x);
        assert_eq!(out.w.value(), w);
        assert_eq!(out.bias.value(), b);
    }

    #[test]
    fn hand_example() {
        let tape = Tape::new();
        let p = LetParams::new(Tensor::vector(vec![1.0]), Tensor::vector(vec![2.0])).unwrap();
        let out = let_transform(
            tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap()),
            tape.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap()),
            tape.constant(Tensor::vector(vec![0.25])),
            &p.constants(&tape).unwrap(),
        )
        .unwrap();
        assert_eq!(out.x.value().data(), &[0.5]);
        assert_eq!(out.w.value().data(), &[6.0]);
        assert_eq!(out.bias.value().data(), &[3.25]);
    }

    #[test]
    fn full_precision_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let tape = Tape::new();
            let (n, d, m) = (5, 6, 3);
            let x = random(&mut rng, &[n, d], -2.0, 2.0);
            let w = random(&mut rng, &[d, m], -1.0, 1.0);
            let b = random(&mut rng, &[m], -1.0, 1.0);
            let p = LetParams::new(random(&mut rng, &[d], -0.5, 0.5), random(&mut rng, &[d], 0.2, 3.0)).unwrap();
            let reference = x.matmul(&w).unwrap();
            let out = let_transform(tape.constant(x), tape.constant(w), tape.constant(b.clone()), &p.constants(&tape).unwrap()).unwrap();
            let y = out.x.value().matmul(&out.w.value()).unwrap();
            for i in 0..n {
                for j in 0..m {
                    let want = reference.data()[i * m + j] + b.data()[j];
                    let got = y.data()[i * m + j] + out.bias.value().data()[j];
                    assert!((want - got).abs() <= 1e-9 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert!(matches!(
            LetParams::new(Tensor::vector(vec![0.0, 0.0]), Tensor::vector(vec![1.0, 0.0])),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn token_scale_by_hand() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![2.0, -2.0, 5.0, 5.0]).unwrap());
        let state = HierLetState::default();
        let (x1, s) = hier_let_token_scale(x, &state).unwrap();
        assert_eq!(s.value().data(), &[2.0, 1e-6]);
        assert_eq!(x1.value().row(0), &[1.0, -1.0]);
        assert_eq!(x1.value().row(1), &[5.0 / 1e-6, 5.0 / 1e-6]);
    }

    #[test]
    fn token_scale_normalises_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let x = random(&mut rng, &[16, 12], -5.0, 5.0);
        let (x1, s) = hier_let_token_scale(tape.constant(x), &HierLetState::default()).unwrap();
        let x1 = x1.value();
        for r in 0..16 {
            assert!(s.value().data()[r] >= 1e-6);
            assert!((population_variance(x1.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn token_scale_gradient_finite_on_constant_rows() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let (x1, _) = hier_let_token_scale(x, &HierLetState::default()).unwrap();
        tape.backward(x1.sum().unwrap()).unwrap();
        assert!(x.grad().unwrap().all_finite());
    }
}
