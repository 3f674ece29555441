use rand::Rng;

use super::{uniform_fan_in, BoundParams, NumericsError, ParamId, ParamStore, Result, Tensor, Var};

/// Gate weights of a gated recurrent unit, packed `[reset | update | candidate]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruWeights {
    /// `[d_in, 3 * d_h]`
    pub w_input: ParamId,
    /// `[d_h, 3 * d_h]`
    pub w_hidden: ParamId,
    /// `[3 * d_h]`
    pub b_input: ParamId,
    /// `[3 * d_h]`
    pub b_hidden: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_h: usize,
    ) -> Self {
        Self {
            w_input: store.add(
                format!("{name}.w_input"),
                uniform_fan_in(rng, &[d_in, 3 * d_h], d_in),
            ),
            w_hidden: store.add(
                format!("{name}.w_hidden"),
                uniform_fan_in(rng, &[d_h, 3 * d_h], d_h),
            ),
            b_input: store.add(format!("{name}.b_input"), Tensor::zeros(&[3 * d_h])),
            b_hidden: store.add(format!("{name}.b_hidden"), Tensor::zeros(&[3 * d_h])),
            d_in,
            d_h,
        }
    }
}

/// One GRU step over a batch: `x: [n, d_in]`, `h: [n, d_h]` -> `[n, d_h]`.
///
/// `r = σ(x Wr + h Ur)`, `z = σ(x Wz + h Uz)`, `c = tanh(x Wc + r ⊙ (h Uc))`,
/// output `(1 - z) ⊙ h + z ⊙ c`.
pub fn gru_cell<'t>(
    p: &BoundParams<'t>,
    w: &GruWeights,
    x: Var<'t>,
    h: Var<'t>,
) -> Result<Var<'t>> {
    let (xs, hs) = (x.shape(), h.shape());
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || xs[1] != w.d_in || hs[1] != w.d_h {
        return Err(NumericsError::Shape {
            op: "gru_cell",
            lhs: xs,
            rhs: hs,
        });
    }
    let d = w.d_h;
    let gx = x.affine(p.get(w.w_input), p.get(w.b_input))?;
    let gh = h.affine(p.get(w.w_hidden), p.get(w.b_hidden))?;
    let r = gx.slice(1, 0, d)?.add(gh.slice(1, 0, d)?)?.sigmoid()?;
    let z = gx.slice(1, d, d)?.add(gh.slice(1, d, d)?)?.sigmoid()?;
    let c = gx
        .slice(1, 2 * d, d)?
        .add(r.mul(gh.slice(1, 2 * d, d)?)?)?
        .tanh()?;
    // (1 - z) h + z c = h + z (c - h)
    h.add(z.mul(c.sub(h)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_zero_inputs_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = GruWeights::new(&mut store, &mut rng, "gru", 3, 4);
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let out = gru_cell(&tape.bind(&store), &w, x, h).unwrap();
        assert_eq!(out.value().data(), &[0.0; 4]);
    }

    #[test]
    fn closed_update_gate_keeps_hidden_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = GruWeights::new(&mut store, &mut rng, "gru", 3, 4);
        let b = store.value_mut(w.b_input);
        for v in &mut b.data_mut()[4..8] {
            *v = -60.0;
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.4, -0.3, 0.9]).unwrap());
        let hv = vec![0.2, -0.5, 0.7, 0.1];
        let h = tape.constant(Tensor::new(vec![1, 4], hv.clone()).unwrap());
        let out = gru_cell(&tape.bind(&store), &w, x, h).unwrap().value();
        for (a, b) in out.data().iter().zip(&hv) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = GruWeights::new(&mut store, &mut rng, "gru", 3, 4);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            gru_cell(&tape.bind(&store), &w, x, h),
            Err(NumericsError::Shape { op: "gru_cell", .. })
        ));
    }
}
