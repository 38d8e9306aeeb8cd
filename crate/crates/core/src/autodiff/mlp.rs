//! Fully-connected networks: ReLU hidden layers, linear output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{NodeId, Tape};
use crate::error::CqnpError;

/// Layer widths `[d_in, hidden..., d_out]`. At least one hidden layer,
/// every width >= 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self, CqnpError> {
        if widths.len() < 3 {
            return Err(CqnpError::Config(format!(
                "MLP needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(CqnpError::Config(format!(
                "MLP widths must be >= 1, got {widths:?}"
            )));
        }
        Ok(MlpSpec { widths })
    }

    /// `d_in x [h; depth] x d_out`, the common uniform-width case.
    pub fn uniform(d_in: usize, hidden: usize, depth: usize, d_out: usize) -> Result<Self, CqnpError> {
        let mut widths = Vec::with_capacity(depth + 2);
        widths.push(d_in);
        widths.extend(std::iter::repeat(hidden).take(depth));
        widths.push(d_out);
        MlpSpec::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Weights and biases for one [`MlpSpec`]. Weight matrices are stored
/// (fan_in, fan_out) so a batch of rows multiplies from the left.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(Matrix, Matrix)>,
}

impl Mlp {
    /// Fan-in-scaled uniform init, bound sqrt(1/fan_in); biases zero.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.n_layers());
        for w in spec.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push((
                Matrix::from_vec(fan_in, fan_out, data),
                Matrix::zeros(1, fan_out),
            ));
        }
        Mlp { spec, layers }
    }

    pub fn zeroed(spec: MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| (Matrix::zeros(w[0], w[1]), Matrix::zeros(1, w[1])))
            .collect();
        Mlp { spec, layers }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[(Matrix, Matrix)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(Matrix, Matrix)] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Append all parameters to `out` in layer order, weights then bias.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
    }

    /// Load parameters from a flat slice; returns the number consumed.
    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<usize, CqnpError> {
        let need = self.param_count();
        if flat.len() < need {
            return Err(CqnpError::Format(format!(
                "parameter buffer too short: need {need}, have {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (w, b) in &mut self.layers {
            let wl = w.len();
            w.data_mut().copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = b.len();
            b.data_mut().copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(need)
    }

    /// Forward a single vector without recording a tape.
    pub fn forward_vec(&self, input: &[f64]) -> Result<Vec<f64>, CqnpError> {
        if input.len() != self.spec.d_in() {
            return Err(CqnpError::Config(format!(
                "MLP input length {} does not match d_in {}",
                input.len(),
                self.spec.d_in()
            )));
        }
        let mut act = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut next = b.data().to_vec();
            for (r, &a) in act.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (n, &wv) in next.iter_mut().zip(w.row_slice(r)) {
                    *n += a * wv;
                }
            }
            if i < last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            act = next;
        }
        Ok(act)
    }

    /// Register this network's parameters on a tape, assigning consecutive
    /// param ids starting at `first_id`. Returns per-layer (weight, bias)
    /// node ids and the next free id.
    pub fn register(&self, tape: &mut Tape, first_id: usize) -> (Vec<(NodeId, NodeId)>, usize) {
        let mut ids = Vec::with_capacity(self.layers.len());
        let mut pid = first_id;
        for (w, b) in &self.layers {
            let wn = tape.param(pid, w.clone());
            let bn = tape.param(pid + 1, b.clone());
            ids.push((wn, bn));
            pid += 2;
        }
        (ids, pid)
    }

    /// Tape forward over a (n, d_in) batch node.
    pub fn forward_node(&self, tape: &mut Tape, input: NodeId, ids: &[(NodeId, NodeId)]) -> NodeId {
        let last = ids.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in ids.iter().enumerate() {
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = if i < last { tape.relu(z) } else { z };
        }
        h
    }

    /// Tape forward where the first layer's input is split into a per-group
    /// part `shared` (n, d_in - tail) and a per-row part `tail`
    /// (n * k, tail_width): the shared rows are expanded `k` times after the
    /// first matmul, so the expensive product happens once per group.
    ///
    /// Equivalent to `forward_node` over `concat(repeat_rows(shared, k), tail)`.
    pub fn forward_node_split(
        &self,
        tape: &mut Tape,
        shared: NodeId,
        tail: NodeId,
        k: usize,
        ids: &[(NodeId, NodeId)],
    ) -> NodeId {
        let (w1, b1) = ids[0];
        let d_in = self.spec.d_in();
        let tail_w = tape.value(tail).cols();
        let split = d_in - tail_w;
        let w_shared = tape.slice_rows(w1, 0, split);
        let w_tail = tape.slice_rows(w1, split, d_in);
        let zs = tape.matmul(shared, w_shared);
        let zs = tape.add_row(zs, b1);
        let zs = tape.repeat_rows(zs, k);
        let zt = tape.matmul(tail, w_tail);
        let z = tape.add(zs, zt);
        let mut h = if ids.len() == 1 { z } else { tape.relu(z) };
        for (i, &(w, b)) in ids.iter().enumerate().skip(1) {
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = if i < ids.len() - 1 { tape.relu(z) } else { z };
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![2, 8]).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1]).is_err());
        let s = MlpSpec::new(vec![2, 8, 1]).unwrap();
        assert_eq!(s.param_count(), 2 * 8 + 8 + 8 + 1);
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let mlp = Mlp::zeroed(MlpSpec::new(vec![3, 4, 2]).unwrap());
        let out = mlp.forward_vec(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn relu_gates_negative_preactivation() {
        // 1-1-1 net, all weights 1, biases 0: input -2 dies at the hidden ReLU.
        let mut mlp = Mlp::zeroed(MlpSpec::new(vec![1, 1, 1]).unwrap());
        for (w, _) in mlp.layers_mut() {
            w.data_mut()[0] = 1.0;
        }
        assert_eq!(mlp.forward_vec(&[-2.0]).unwrap(), vec![0.0]);
        assert_eq!(mlp.forward_vec(&[3.0]).unwrap(), vec![3.0]);
    }

    /// Straight-line interpreter: evaluates the affine/ReLU chain with
    /// explicit loops, independent of the Matrix/Tape machinery.
    fn straight_line(mlp: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut act = input.to_vec();
        let n = mlp.layers().len();
        for (i, (w, b)) in mlp.layers().iter().enumerate() {
            let (din, dout) = w.shape();
            let mut next = vec![0.0; dout];
            for j in 0..dout {
                let mut s = b.get(0, j);
                for r in 0..din {
                    s += act[r] * w.get(r, j);
                }
                next[j] = if i + 1 < n { s.max(0.0) } else { s };
            }
            act = next;
        }
        act
    }

    #[test]
    fn forward_matches_straight_line_interpreter() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let spec = MlpSpec::new(vec![3, 5, 4, 2]).unwrap();
            let mlp = Mlp::init(spec, &mut rng);
            let input: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = mlp.forward_vec(&input).unwrap();
            let want = straight_line(&mlp, &input);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mlp = Mlp::init(MlpSpec::new(vec![2, 16, 16, 1]).unwrap(), &mut rng);
        let a = mlp.forward_vec(&[0.3, -1.4]).unwrap();
        let b = mlp.forward_vec(&[0.3, -1.4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_forward_matches_plain_forward() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mlp = Mlp::init(MlpSpec::new(vec![4, 6, 3]).unwrap(), &mut rng);
        let shared = Matrix::from_vec(2, 3, vec![0.1, -0.2, 0.4, 1.0, 0.5, -0.3]);
        let tail = Matrix::column(&[0.25, 0.5, 0.75, 0.1, 0.2, 0.3]);
        let k = 3;

        let mut t1 = Tape::new();
        let (ids1, _) = mlp.register(&mut t1, 0);
        let sh = t1.constant(shared.clone());
        let tl = t1.constant(tail.clone());
        let out_split = {
            let o = mlp.forward_node_split(&mut t1, sh, tl, k, &ids1);
            t1.value(o).clone()
        };

        let mut t2 = Tape::new();
        let (ids2, _) = mlp.register(&mut t2, 0);
        let sh2 = t2.constant(shared);
        let rep = t2.repeat_rows(sh2, k);
        let tl2 = t2.constant(tail);
        let full = t2.concat_cols(rep, tl2);
        let out_plain = {
            let o = mlp.forward_node(&mut t2, full, &ids2);
            t2.value(o).clone()
        };

        assert_eq!(out_split.shape(), out_plain.shape());
        for (a, b) in out_split.iter().zip(out_plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
