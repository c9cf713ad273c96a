//! Layer builders over parameter groups: linear, two-layer MLP, GRU cell,
//! and embedding lookup. Initialization follows the uniform
//! `+-1/sqrt(fan)` convention (hidden size for recurrent weights).

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamGroup, Result, Tape, Tensor, Var};

pub fn init_linear(
    rng: &mut ChaCha8Rng,
    group: &mut ParamGroup,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    group.add(
        format!("{prefix}.w"),
        Tensor::uniform(vec![in_dim, out_dim], bound, rng),
    );
    group.add(
        format!("{prefix}.b"),
        Tensor::uniform(vec![out_dim], bound, rng),
    );
}

/// `x * W + b` for row-major `x` of shape `[rows, in_dim]`.
pub fn linear(tape: &Tape, group: &ParamGroup, prefix: &str, x: &Var) -> Result<Var> {
    let w = tape.param(&group.get(&format!("{prefix}.w"))?);
    let b = tape.param(&group.get(&format!("{prefix}.b"))?);
    x.matmul(&w)?.add_row(&b)
}

pub fn init_mlp(
    rng: &mut ChaCha8Rng,
    group: &mut ParamGroup,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
) {
    init_linear(rng, group, &format!("{prefix}.l1"), in_dim, hidden);
    init_linear(rng, group, &format!("{prefix}.l2"), hidden, out_dim);
}

/// Two-layer MLP with a relu hidden activation and a linear output.
pub fn mlp(tape: &Tape, group: &ParamGroup, prefix: &str, x: &Var) -> Result<Var> {
    let h = linear(tape, group, &format!("{prefix}.l1"), x)?.relu();
    linear(tape, group, &format!("{prefix}.l2"), &h)
}

pub fn init_gru(
    rng: &mut ChaCha8Rng,
    group: &mut ParamGroup,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
) {
    let bound = 1.0 / (hidden as f64).sqrt();
    group.add(
        format!("{prefix}.wih"),
        Tensor::uniform(vec![in_dim, 3 * hidden], bound, rng),
    );
    group.add(
        format!("{prefix}.whh"),
        Tensor::uniform(vec![hidden, 3 * hidden], bound, rng),
    );
    group.add(
        format!("{prefix}.bih"),
        Tensor::uniform(vec![3 * hidden], bound, rng),
    );
    group.add(
        format!("{prefix}.bhh"),
        Tensor::uniform(vec![3 * hidden], bound, rng),
    );
}

/// One GRU step over a batch of rows. Gate layout is `[reset, update,
/// candidate]` with the reset gate applied to the hidden-side candidate
/// term before the tanh:
///
/// ```text
/// r = sigmoid(x Wr + h Ur + br)      z = sigmoid(x Wz + h Uz + bz)
/// n = tanh(x Wn + bn_x + r * (h Un + bn_h))
/// h' = n + z * (h - n)
/// ```
pub fn gru_cell(tape: &Tape, group: &ParamGroup, prefix: &str, x: &Var, h: &Var) -> Result<Var> {
    let wih = tape.param(&group.get(&format!("{prefix}.wih"))?);
    let whh = tape.param(&group.get(&format!("{prefix}.whh"))?);
    let bih = tape.param(&group.get(&format!("{prefix}.bih"))?);
    let bhh = tape.param(&group.get(&format!("{prefix}.bhh"))?);
    let hid = h.cols();

    let gi = x.matmul(&wih)?.add_row(&bih)?;
    let gh = h.matmul(&whh)?.add_row(&bhh)?;
    let r = gi
        .slice_cols(0, hid)?
        .add(&gh.slice_cols(0, hid)?)?
        .sigmoid();
    let z = gi
        .slice_cols(hid, 2 * hid)?
        .add(&gh.slice_cols(hid, 2 * hid)?)?
        .sigmoid();
    let n = gi
        .slice_cols(2 * hid, 3 * hid)?
        .add(&r.mul(&gh.slice_cols(2 * hid, 3 * hid)?)?)?
        .tanh();
    n.add(&z.mul(&h.sub(&n)?)?)
}

pub fn init_embedding(
    rng: &mut ChaCha8Rng,
    group: &mut ParamGroup,
    name: &str,
    rows: usize,
    dim: usize,
) {
    let bound = 1.0 / (dim as f64).sqrt();
    group.add(name, Tensor::uniform(vec![rows, dim], bound, rng));
}

/// Row lookup into an embedding table; gradients scatter-add per id.
pub fn embedding(tape: &Tape, group: &ParamGroup, name: &str, ids: &[usize]) -> Result<Var> {
    let table = tape.param(&group.get(name)?);
    table.gather_rows(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    #[test]
    fn gru_cell_matches_scalar_recurrence() {
        // With 1-dim input and hidden, hand-evaluate the gate equations.
        let mut rng = derive(0, Stream::Init, 0);
        let mut g = ParamGroup::new("g");
        init_gru(&mut rng, &mut g, "gru", 1, 1);
        let vec_of = |name: &str| -> Vec<f64> { g.get(name).unwrap().borrow().data().to_vec() };
        let (wih, whh, bih, bhh) = (
            vec_of("gru.wih"),
            vec_of("gru.whh"),
            vec_of("gru.bih"),
            vec_of("gru.bhh"),
        );

        let (x, h) = (0.4, -0.3);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(x * wih[0] + bih[0] + h * whh[0] + bhh[0]);
        let zg = sig(x * wih[1] + bih[1] + h * whh[1] + bhh[1]);
        let n = (x * wih[2] + bih[2] + r * (h * whh[2] + bhh[2])).tanh();
        let expect = (1.0 - zg) * n + zg * h;

        let tape = Tape::new();
        let xv = tape.constant_matrix(1, 1, vec![x]).unwrap();
        let hv = tape.constant_matrix(1, 1, vec![h]).unwrap();
        let out = gru_cell(&tape, &g, "gru", &xv, &hv).unwrap();
        assert!((out.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_bias_broadcasts_rows() {
        let mut rng = derive(1, Stream::Init, 0);
        let mut g = ParamGroup::new("g");
        init_linear(&mut rng, &mut g, "l", 2, 3);
        let tape = Tape::new();
        let x = tape.constant_matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = linear(&tape, &g, "l", &x).unwrap();
        let w = g.get("l.w").unwrap();
        let b = g.get("l.b").unwrap();
        let (w, b) = (w.borrow(), b.borrow());
        let v = y.value_vec();
        for j in 0..3 {
            assert!((v[j] - (w.data()[j] + b.data()[j])).abs() < 1e-12);
            assert!((v[3 + j] - (w.data()[3 + j] + b.data()[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_gathers_rows() {
        let mut rng = derive(2, Stream::Init, 0);
        let mut g = ParamGroup::new("g");
        init_embedding(&mut rng, &mut g, "emb", 4, 3);
        let tape = Tape::new();
        let e = embedding(&tape, &g, "emb", &[2, 2, 0]).unwrap();
        let table = g.get("emb").unwrap();
        let t = table.borrow();
        let v = e.value_vec();
        assert_eq!(&v[0..3], &t.data()[6..9]);
        assert_eq!(&v[3..6], &t.data()[6..9]);
        assert_eq!(&v[6..9], &t.data()[0..3]);
    }
}
