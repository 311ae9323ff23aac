//! Parameter storage, the Adam optimizer, gradient checking, and the flat
//! binary blob format model weights serialize to.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One named parameter: a value tensor plus a gradient accumulator of the
/// same shape. Non-trainable entries (batch-norm running statistics,
/// histogram tables) ride along for serialization but are skipped by the
/// optimizer.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Parameter<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.n, value.c, value.h, value.w);
        self.entries.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Handle of the i-th entry in declaration order.
    pub fn nth_id(&self, i: usize) -> ParamId {
        assert!(i < self.entries.len());
        ParamId(i)
    }

    pub fn add_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        let g = &mut self.entries[id.0].grad;
        debug_assert_eq!(g.shape(), delta.shape(), "gradient shape mismatch");
        for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for v in &mut e.grad.data {
                *v = T::zero();
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    /// Total scalar count across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Flattens every entry's values in declaration order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for e in &self.entries {
            out.extend_from_slice(&e.value.data);
        }
        out
    }

    /// Loads flat values back into the entries; shapes must already match.
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::format(format!(
                "parameter blob holds {} values, model declares {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn map_into<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Parameter {
                    name: e.name.clone(),
                    value: Tensor {
                        n: e.value.n,
                        c: e.value.c,
                        h: e.value.h,
                        w: e.value.w,
                        data: e.value.data.iter().map(|v| U::c(v.f64())).collect(),
                    },
                    grad: Tensor::zeros(e.value.n, e.value.c, e.value.h, e.value.w),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Fan-in scaled uniform init, bound sqrt(6 / fan_in).
pub fn init_conv_weight<T: Scalar>(
    rng: &mut ChaCha20Rng,
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let fan_in = (ic * kh * kw).max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(oc, ic, kh, kw);
    for v in &mut t.data {
        *v = T::c(rng.gen_range(-bound..bound));
    }
    t
}

/// Adam optimizer state: step count plus first/second moment accumulators,
/// one pair per parameter entry.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub alpha: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// The training hyper-parameters: alpha 0.001, beta1 0.9, beta2 0.999.
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_hyperparams(store, T::c(0.001), T::c(0.9), T::c(0.999), T::c(1e-8))
    }

    pub fn with_hyperparams(store: &ParamStore<T>, alpha: T, beta1: T, beta2: T, epsilon: T) -> Self {
        let m = store
            .iter()
            .map(|e| Tensor::zeros(e.value.n, e.value.c, e.value.h, e.value.w))
            .collect();
        let v = store
            .iter()
            .map(|e| Tensor::zeros(e.value.n, e.value.c, e.value.h, e.value.w))
            .collect();
        AdamState {
            step: 0,
            alpha,
            beta1,
            beta2,
            epsilon,
            m,
            v,
        }
    }
}

/// One Adam update over every trainable parameter, with the learning rate
/// scaled by `lr_scale` (0 disables the step but still clears gradients).
/// A non-finite gradient aborts the update before any parameter moves.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr_scale: T,
) -> Result<()> {
    for e in store.entries.iter() {
        if e.trainable && !e.grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter '{}' is not finite; update aborted",
                e.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = T::one() - state.beta1.powi(t);
    let bias2 = T::one() - state.beta2.powi(t);
    let lr = state.alpha * lr_scale;
    for (i, e) in store.entries.iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..e.value.data.len() {
            let g = e.grad.data[j];
            m.data[j] = state.beta1 * m.data[j] + (T::one() - state.beta1) * g;
            v.data[j] = state.beta2 * v.data[j] + (T::one() - state.beta2) * g * g;
            let mhat = m.data[j] / bias1;
            let vhat = v.data[j] / bias2;
            e.value.data[j] = e.value.data[j] - lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Learning-rate multiplier for update `u` of `total`: 1 until
/// `decay_start` (fraction of total), then linear to 0 at the final update.
pub fn lr_scale(update: usize, total: usize, decay_start: f64) -> f64 {
    assert!(update < total);
    let last = total - 1;
    if last == 0 {
        return 1.0;
    }
    let start = ((total as f64) * decay_start).floor() as usize;
    if update < start {
        return 1.0;
    }
    if start >= last {
        return if update < last { 1.0 } else { 0.0 };
    }
    (last - update) as f64 / (last - start) as f64
}

/// Central-difference gradient check with step 1e-4. `f` evaluates the loss
/// at the store's current values; `analytic` holds d loss / d parameter for
/// the trainable entries, flattened in declaration order. Returns
/// max |analytic - fd| / max(1, |fd|).
pub fn grad_check<T: Scalar>(
    store: &mut ParamStore<T>,
    analytic: &[T],
    mut f: impl FnMut(&ParamStore<T>) -> T,
) -> f64 {
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut k = 0;
    for i in 0..store.entries.len() {
        if !store.entries[i].trainable {
            continue;
        }
        for j in 0..store.entries[i].value.data.len() {
            let orig = store.entries[i].value.data[j];
            store.entries[i].value.data[j] = orig + T::c(h);
            let fp = f(store).f64();
            store.entries[i].value.data[j] = orig - T::c(h);
            let fm = f(store).f64();
            store.entries[i].value.data[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic[k].f64() - fd).abs() / fd.abs().max(1.0);
            if err > worst {
                worst = err;
            }
            k += 1;
        }
    }
    assert_eq!(k, analytic.len(), "analytic gradient length mismatch");
    worst
}

/// Flattened trainable gradients in declaration order, the companion of
/// `grad_check`.
pub fn flat_trainable_grads<T: Scalar>(store: &ParamStore<T>) -> Vec<T> {
    let mut out = Vec::new();
    for e in store.iter() {
        if e.trainable {
            out.extend_from_slice(&e.grad.data);
        }
    }
    out
}

/// Sampled central-difference check for networks with clamp/leaky-relu
/// corners: a coordinate only counts when two stencils (h and h/2) agree,
/// i.e. when the loss is smooth in its neighborhood. Returns
/// (max relative error over kept samples, kept count).
pub fn filtered_grad_check<T: Scalar>(
    store: &mut ParamStore<T>,
    analytic: &[T],
    mut f: impl FnMut(&ParamStore<T>) -> T,
    samples: usize,
    seed: u64,
) -> (f64, usize) {
    use rand::{Rng, SeedableRng};
    let mut map = Vec::new();
    for (i, e) in store.entries.iter().enumerate() {
        if e.trainable {
            for j in 0..e.value.data.len() {
                map.push((i, j));
            }
        }
    }
    assert_eq!(map.len(), analytic.len(), "analytic gradient length mismatch");
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut kept = 0usize;
    let mut fd_at = |store: &mut ParamStore<T>, i: usize, j: usize, h: f64| {
        let orig = store.entries[i].value.data[j];
        store.entries[i].value.data[j] = orig + T::c(h);
        let fp = f(store).f64();
        store.entries[i].value.data[j] = orig - T::c(h);
        let fm = f(store).f64();
        store.entries[i].value.data[j] = orig;
        (fp - fm) / (2.0 * h)
    };
    for _ in 0..samples {
        let k = rng.gen_range(0..map.len());
        let (i, j) = map[k];
        let fd1 = fd_at(store, i, j, 1e-5);
        let fd2 = fd_at(store, i, j, 5e-6);
        if (fd1 - fd2).abs() > 0.05 * fd1.abs().max(1e-3) {
            continue; // kink inside the stencil; derivative undefined here
        }
        kept += 1;
        let err = (analytic[k].f64() - fd1).abs() / fd1.abs().max(1.0);
        worst = worst.max(err);
    }
    (worst, kept)
}

// --- model blob format ------------------------------------------------
//
// magic "MSICMDL" | version u16 LE | count u32 LE | count * f32 LE | fnv1a64
// of the f32 payload bytes, u64 LE.

const BLOB_MAGIC: &[u8; 7] = b"MSICMDL";
const BLOB_VERSION: u16 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Serializes the store (all entries, declaration order) as 32-bit floats.
pub fn write_blob<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let flat = store.flatten();
    let mut payload = Vec::with_capacity(flat.len() * 4);
    for v in &flat {
        payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + 21);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    out
}

/// Parses a blob into flat f32 values, validating magic, version, count and
/// checksum.
pub fn read_blob(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 13 {
        return Err(Error::format("model blob shorter than header"));
    }
    if &bytes[0..7] != BLOB_MAGIC {
        return Err(Error::format("bad model blob magic"));
    }
    let version = u16::from_le_bytes([bytes[7], bytes[8]]);
    if version != BLOB_VERSION {
        return Err(Error::format(format!("unsupported model blob version {version}")));
    }
    let count = u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]) as usize;
    let need = 13 + count * 4 + 8;
    if bytes.len() != need {
        return Err(Error::format(format!(
            "model blob length {} does not match declared count {}",
            bytes.len(),
            count
        )));
    }
    let payload = &bytes[13..13 + count * 4];
    let stored = u64::from_le_bytes(bytes[need - 8..need].try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::format("model blob checksum mismatch"));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        out.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(out)
}

/// Restores store values from a blob produced by `write_blob`.
pub fn load_blob<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let flat = read_blob(bytes)?;
    let vals: Vec<T> = flat.iter().map(|&v| T::c(v as f64)).collect();
    store.unflatten(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(1, 1, 1, 2, 1.5), true);
        let mut adam = AdamState::new(&store);
        adam_step(&mut store, &mut adam, 1.0).unwrap();
        assert_eq!(store.value(id).data, vec![1.5, 1.5]);
    }

    #[test]
    fn adam_zero_lr_scale_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(1, 1, 1, 1, 2.0), true);
        let mut adam = AdamState::new(&store);
        store.add_grad(id, &Tensor::full(1, 1, 1, 1, 1.0));
        adam_step(&mut store, &mut adam, 0.0).unwrap();
        assert_eq!(store.value(id).data, vec![2.0]);
        // Gradients cleared even when the step is a no-op.
        assert_eq!(store.grad(id).data, vec![0.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(1, 1, 1, 1, 2.0), true);
        let mut adam = AdamState::new(&store);
        store.add_grad(id, &Tensor::full(1, 1, 1, 1, f64::NAN));
        assert!(adam_step(&mut store, &mut adam, 1.0).is_err());
        assert_eq!(store.value(id).data, vec![2.0]);
    }

    #[test]
    fn grad_check_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let _ = store.add("x", Tensor::full(1, 1, 1, 1, 3.0), true);
        // f(x) = x^2, analytic gradient 6 at x=3.
        let err = grad_check(&mut store, &[6.0], |s| {
            let x = s.value(ParamId(0)).data[0];
            x * x
        });
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn blob_round_trip_and_checksum() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::full(1, 1, 2, 2, 0.25), true);
        store.add("stats", Tensor::full(1, 1, 1, 3, -1.5), false);
        let blob = write_blob(&store);
        assert_eq!(&blob[0..7], b"MSICMDL");

        let mut store2 = ParamStore::<f32>::new();
        store2.add("a", Tensor::zeros(1, 1, 2, 2), true);
        store2.add("stats", Tensor::zeros(1, 1, 1, 3), false);
        load_blob(&mut store2, &blob).unwrap();
        assert_eq!(store2.flatten(), store.flatten());

        let mut corrupted = blob.clone();
        corrupted[15] ^= 0xff;
        assert!(read_blob(&corrupted).is_err());
    }
}
