//! Dense MLP kernels over the flat parameter vector: forward with activation
//! cache, and the matching reverse pass. Hidden layers use tanh; output
//! layers are linear, optionally with a linear skip from the input to the
//! first output unit (used by the SDF decoder so a distance-like channel can
//! pass straight through the nonlinearity).

/// Layer sizes `[input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub skip: bool,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, skip: bool) -> Self {
        assert!(sizes.len() >= 2);
        MlpSpec { sizes, skip }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Parameter count: per layer `out*in` weights + `out` biases, plus the
    /// optional skip row of `input` weights.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in 0..self.n_layers() {
            n += self.sizes[l + 1] * self.sizes[l] + self.sizes[l + 1];
        }
        if self.skip {
            n += self.input();
        }
        n
    }
}

/// Offsets of each layer's weight/bias block inside the flat parameter
/// vector, resolved once at field construction.
#[derive(Debug, Clone)]
pub struct MlpOffsets {
    pub w: Vec<usize>,
    pub b: Vec<usize>,
    pub skip: Option<usize>,
}

impl MlpOffsets {
    /// Lay the blocks out contiguously starting at `base`; returns the
    /// offsets and the total length consumed.
    pub fn contiguous(spec: &MlpSpec, base: usize) -> (Self, usize) {
        let mut w = Vec::new();
        let mut b = Vec::new();
        let mut at = base;
        for l in 0..spec.n_layers() {
            w.push(at);
            at += spec.sizes[l + 1] * spec.sizes[l];
            b.push(at);
            at += spec.sizes[l + 1];
        }
        let skip = if spec.skip {
            let s = at;
            at += spec.input();
            Some(s)
        } else {
            None
        };
        (MlpOffsets { w, b, skip }, at - base)
    }
}

/// Activations retained for the reverse pass: `acts[0]` is the input copy,
/// `acts[l]` (l >= 1) the post-tanh output of hidden layer l. `out` is the
/// linear output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub acts: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl MlpCache {
    pub fn for_spec(spec: &MlpSpec) -> Self {
        let mut acts = Vec::with_capacity(spec.sizes.len() - 1);
        for l in 0..spec.sizes.len() - 1 {
            acts.push(vec![0.0; spec.sizes[l]]);
        }
        MlpCache {
            acts,
            out: vec![0.0; spec.output()],
        }
    }
}

#[inline]
fn matvec_bias(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        *out_v = acc;
    }
}

/// Forward pass; writes the output into `cache.out` and fills the cache.
pub fn forward(params: &[f64], spec: &MlpSpec, off: &MlpOffsets, input: &[f64], cache: &mut MlpCache) {
    debug_assert_eq!(input.len(), spec.input());
    cache.acts[0].copy_from_slice(input);
    let n_layers = spec.n_layers();
    for l in 0..n_layers {
        let n_in = spec.sizes[l];
        let n_out = spec.sizes[l + 1];
        let w = &params[off.w[l]..off.w[l] + n_out * n_in];
        let b = &params[off.b[l]..off.b[l] + n_out];
        if l + 1 < n_layers {
            // Hidden layer: write pre-activation into the next act buffer,
            // then squash in place.
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let x = &head[l];
            let a = &mut tail[0];
            matvec_bias(w, b, x, a);
            for v in a.iter_mut() {
                *v = v.tanh();
            }
        } else {
            let x = &cache.acts[l];
            matvec_bias(w, b, x, &mut cache.out);
        }
    }
    if let Some(s) = off.skip {
        let row = &params[s..s + spec.input()];
        let mut acc = 0.0;
        for i in 0..spec.input() {
            acc += row[i] * input[i];
        }
        cache.out[0] += acc;
    }
}

/// Reverse pass. Accumulates parameter gradients into `grad` (same layout as
/// `params`) and the input gradient into `d_input` (added, not overwritten).
pub fn backward(
    params: &[f64],
    spec: &MlpSpec,
    off: &MlpOffsets,
    cache: &MlpCache,
    d_out: &[f64],
    grad: &mut [f64],
    d_input: &mut [f64],
) {
    let n_layers = spec.n_layers();
    // d of the current layer's pre-activation output, walked backwards.
    let mut d_cur: Vec<f64> = d_out.to_vec();
    if let Some(s) = off.skip {
        let input = &cache.acts[0];
        let g = d_out[0];
        for i in 0..spec.input() {
            grad[s + i] += g * input[i];
            d_input[i] += g * params[s + i];
        }
    }
    for l in (0..n_layers).rev() {
        let n_in = spec.sizes[l];
        let n_out = spec.sizes[l + 1];
        let x = &cache.acts[l];
        let w = &params[off.w[l]..off.w[l] + n_out * n_in];
        let gw = off.w[l];
        let gb = off.b[l];
        let mut d_prev = vec![0.0; n_in];
        for o in 0..n_out {
            let g = d_cur[o];
            if g == 0.0 {
                continue;
            }
            grad[gb + o] += g;
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = gw + o * n_in;
            for i in 0..n_in {
                grad[grow + i] += g * x[i];
                d_prev[i] += g * row[i];
            }
        }
        if l > 0 {
            // Through the tanh of the previous hidden layer.
            let a = &cache.acts[l];
            for i in 0..n_in {
                d_prev[i] *= 1.0 - a[i] * a[i];
            }
            d_cur = d_prev;
        } else {
            for i in 0..n_in {
                d_input[i] += d_prev[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn setup(spec: &MlpSpec, seed: u64) -> (Vec<f64>, MlpOffsets) {
        let (off, len) = MlpOffsets::contiguous(spec, 0);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.7..0.7)).collect();
        (params, off)
    }

    #[test]
    fn zero_params_zero_output() {
        let spec = MlpSpec::new(vec![4, 8, 2], false);
        let (off, len) = MlpOffsets::contiguous(&spec, 0);
        let params = vec![0.0; len];
        let mut cache = MlpCache::for_spec(&spec);
        forward(&params, &spec, &off, &[1.0, -2.0, 0.5, 3.0], &mut cache);
        assert_eq!(cache.out, vec![0.0, 0.0]);
    }

    #[test]
    fn skip_passes_channel_through() {
        let spec = MlpSpec::new(vec![3, 4, 2], true);
        let (off, len) = MlpOffsets::contiguous(&spec, 0);
        let mut params = vec![0.0; len];
        params[off.skip.unwrap()] = 1.0; // out[0] += input[0]
        let mut cache = MlpCache::for_spec(&spec);
        forward(&params, &spec, &off, &[0.37, 5.0, -1.0], &mut cache);
        assert_eq!(cache.out[0], 0.37);
        assert_eq!(cache.out[1], 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = MlpSpec::new(vec![5, 7, 6, 3], true);
        let (mut params, off) = setup(&spec, 7);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Scalar probe loss: dot(out, c).
        let c = [0.3, -1.1, 0.7];
        let mut cache = MlpCache::for_spec(&spec);
        forward(&params, &spec, &off, &input, &mut cache);

        let mut grad = vec![0.0; params.len()];
        let mut d_input = vec![0.0; 5];
        backward(&params, &spec, &off, &cache, &c, &mut grad, &mut d_input);

        let loss = |p: &[f64], x: &[f64]| {
            let mut cc = MlpCache::for_spec(&spec);
            forward(p, &spec, &off, x, &mut cc);
            cc.out.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for idx in (0..params.len()).step_by(13) {
            let orig = params[idx];
            params[idx] = orig + h;
            let lp = loss(&params, &input);
            params[idx] = orig - h;
            let lm = loss(&params, &input);
            params[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grad[idx];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                ((num - ana) / denom).abs() < 1e-6,
                "param {idx}: fd {num} vs analytic {ana}"
            );
        }
        // Input gradient too.
        let mut xi = input.clone();
        for i in 0..5 {
            let orig = xi[i];
            xi[i] = orig + h;
            let lp = loss(&params, &xi);
            xi[i] = orig - h;
            let lm = loss(&params, &xi);
            xi[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let denom = num.abs().max(d_input[i].abs()).max(1e-8);
            assert!(((num - d_input[i]) / denom).abs() < 1e-6);
        }
    }
}
