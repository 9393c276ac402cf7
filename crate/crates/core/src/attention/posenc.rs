//! Per-head positional biases: the relative-position table and the
//! log-spaced continuous position bias network.

use crate::error::{MoseError, Result};
use crate::layers::Linear;
use crate::numerics::{ParamGrads, ParamValues, ParameterSet, Rng, Tensor};
use crate::scalar::Scalar;

/// Number of distinct relative offsets in an `m x m` window.
pub fn offset_count(m: usize) -> usize {
    (2 * m - 1) * (2 * m - 1)
}

/// Table row for every ordered token pair `(i, j)` of a window, `M^2 x M^2`.
pub fn relative_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push(dy * (2 * m - 1) + dx);
        }
    }
    idx
}

/// Gather a `(2M-1)^2 x h` table into `h x M^2 x M^2` per-pair biases.
pub fn gather<T: Scalar>(table: &[T], heads: usize, index: &[usize], out: &mut [T]) {
    let pairs = index.len();
    for h in 0..heads {
        for (o, &r) in out[h * pairs..(h + 1) * pairs].iter_mut().zip(index) {
            *o += table[r * heads + h];
        }
    }
}

/// Adjoint of [`gather`].
pub fn scatter<T: Scalar>(dbias: &[T], heads: usize, index: &[usize], dtable: &mut [T]) {
    let pairs = index.len();
    for h in 0..heads {
        for (&d, &r) in dbias[h * pairs..(h + 1) * pairs].iter().zip(index) {
            dtable[r * heads + h] += d;
        }
    }
}

pub fn rpe_gather<T: Scalar>(table: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let s = table.shape();
    if s.len() != 2 || s[0] != offset_count(m) {
        return Err(MoseError::shape(format!(
            "relative position table {s:?} does not fit window {m}"
        )));
    }
    let heads = s[1];
    let index = relative_index(m);
    let mut out = vec![T::zero(); heads * index.len()];
    gather(table.data(), heads, &index, &mut out);
    Tensor::from_vec(&[heads, m * m, m * m], out)
}

/// Log-spaced normalized coordinates of every relative offset, `(2M-1)^2 x 2`.
///
/// Offsets are scaled to `[-8, 8]` and mapped through
/// `sign(x) * log2(1 + |x|) / log2(8)`.
pub fn log_coords<T: Scalar>(m: usize) -> Vec<T> {
    let span = (m - 1).max(1) as f64;
    let f = |d: isize| -> T {
        let x = d as f64 / span * 8.0;
        T::lit(x.signum() * (1.0 + x.abs()).log2() / 8f64.log2())
    };
    let r = m as isize - 1;
    let mut out = Vec::with_capacity(offset_count(m) * 2);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push(f(dy));
            out.push(f(dx));
        }
    }
    out
}

/// Two-layer perceptron `2 -> hidden -> heads` producing per-head biases.
#[derive(Clone, Debug)]
pub struct LogCpbNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub window: usize,
    pub heads: usize,
}

pub struct LogCpbCache<T> {
    coords: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl LogCpbNet {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        window: usize,
        heads: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(MoseError::Config("log-CPB hidden width must be positive".into()));
        }
        Ok(LogCpbNet {
            fc1: Linear::new(ps, &format!("{name}.fc1"), 2, hidden, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, heads, false, rng)?,
            window,
            heads,
        })
    }

    /// Per-offset table `(2M-1)^2 x heads`.
    pub fn table<T: Scalar>(&self, p: &ParamValues<'_, T>) -> (Vec<T>, LogCpbCache<T>) {
        let rows = offset_count(self.window);
        let coords = log_coords::<T>(self.window);
        let pre = self.fc1.forward(p, &coords, rows);
        let act: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
        let table = self.fc2.forward(p, &act, rows);
        (table, LogCpbCache { coords, pre, act })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        cache: &LogCpbCache<T>,
        dtable: &[T],
    ) {
        let rows = offset_count(self.window);
        let dact = self.fc2.backward(p, g, &cache.act, dtable, rows);
        let dpre: Vec<T> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
            .collect();
        self.fc1.backward(p, g, &cache.coords, &dpre, rows);
    }

    pub fn bias<T: Scalar>(&self, p: &ParamValues<'_, T>) -> Tensor<T> {
        let (table, _) = self.table(p);
        let index = relative_index(self.window);
        let mut out = vec![T::zero(); self.heads * index.len()];
        gather(&table, self.heads, &index, &mut out);
        let t = self.window * self.window;
        Tensor::from_vec(&[self.heads, t, t], out).expect("bias shape")
    }
}

/// Per-head bias `h x M^2 x M^2` from a log-CPB network's parameters.
pub fn logcpb_bias<T: Scalar>(net: &LogCpbNet, params: &ParameterSet<T>) -> Tensor<T> {
    net.bias(&params.values())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_two_has_nine_offsets() {
        assert_eq!(offset_count(2), 9);
        let idx = relative_index(2);
        assert_eq!(idx.len(), 16);
        let mut distinct = idx.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 9);
        let t = Tensor::<f64>::from_fn(&[9, 3], |i| i as f64);
        assert_eq!(rpe_gather(&t, 2).unwrap().shape(), &[3, 4, 4]);
    }

    #[test]
    fn constant_table_constant_bias() {
        let t = Tensor::<f32>::full(&[offset_count(3), 2], 0.5);
        assert!(rpe_gather(&t, 3).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn equal_offsets_share_entries() {
        let m = 4;
        let t = Rng::new(1).uniform_tensor::<f64>(&[offset_count(m), 2], -1.0, 1.0);
        let b = rpe_gather(&t, m).unwrap();
        let tok = |y: usize, x: usize| y * m + x;
        let pairs = m * m;
        for h in 0..2 {
            // offset (+1, +2) realized by two distinct pairs
            let a = b.data()[h * pairs * pairs + tok(1, 2) * pairs + tok(0, 0)];
            let c = b.data()[h * pairs * pairs + tok(3, 3) * pairs + tok(2, 1)];
            assert_eq!(a, c);
        }
    }

    #[test]
    fn swap_pairs_use_negated_offsets() {
        let m = 3;
        let idx = relative_index(m);
        let t = m * m;
        let center = (m - 1) * (2 * m - 1) + (m - 1);
        for i in 0..t {
            for j in 0..t {
                assert_eq!(idx[i * t + j] + idx[j * t + i], 2 * center);
            }
        }
    }

    #[test]
    fn log_coords_are_odd() {
        let m = 8;
        let c: Vec<f64> = log_coords(m);
        let r = m as isize - 1;
        let at = |dy: isize, dx: isize| {
            let row = ((dy + r) * (2 * r + 1) + dx + r) as usize;
            (c[2 * row], c[2 * row + 1])
        };
        for d in 1..=r {
            assert_eq!(at(d, 0).0, -at(-d, 0).0);
            assert!(at(d, 0).0 > 0.0);
        }
        assert!((at(r, 0).0 - 9f64.log2() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_net_zero_bias_and_shape() {
        let mut ps = ParameterSet::<f64>::new();
        let net = LogCpbNet::new(&mut ps, "cpb", 8, 6, 16, &mut Rng::new(0)).unwrap();
        let b = logcpb_bias(&net, &ps);
        assert_eq!(b.shape(), &[6, 64, 64]);
        let names: Vec<String> = ps.names().map(str::to_owned).collect();
        for n in names {
            let shape = ps.get(&n).unwrap().shape().to_vec();
            ps.assign(&n, Tensor::zeros(&shape)).unwrap();
        }
        assert!(logcpb_bias(&net, &ps).data().iter().all(|&v| v == 0.0));
    }
}
