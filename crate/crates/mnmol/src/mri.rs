//! Simulated multicoil Cartesian-undersampled Fourier measurement model,
//! synthetic data generation, and the regularized least-squares (SENSE)
//! initializer.
//!
//! The forward operator applies coil sensitivities, a unitary 2-d FFT and a
//! binary k-space mask per coil. With per-pixel-normalized coil maps this
//! keeps the operator norm at most one, so eigenvalues of the normal
//! operator live in [0, 1].

use crate::error::{Error, Result};
use crate::fft::fft2_unitary;
use crate::solvers::cg_solve;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

/// H x W complex image stored as two real channels `[2, h, w]`
/// (channel 0 real, channel 1 imaginary).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    t: Tensor,
}

impl ComplexImage {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 2 {
            return Err(Error::ShapeMismatch {
                op: "ComplexImage::new",
                lhs: t.shape().to_vec(),
                rhs: vec![2, 0, 0],
            });
        }
        Ok(ComplexImage { t })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexImage {
            t: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn randn<R: Rng>(h: usize, w: usize, rng: &mut R) -> Self {
        ComplexImage {
            t: Tensor::randn(&[2, h, w], rng),
        }
    }

    pub fn h(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.t
    }

    pub fn into_tensor(self) -> Tensor {
        self.t
    }

    pub fn norm(&self) -> f64 {
        self.t.norm()
    }

    pub fn dist(&self, other: &ComplexImage) -> Result<f64> {
        self.t.dist(&other.t)
    }

    /// Real part of the complex inner product: the plain dot product of the
    /// two-channel representations.
    pub fn dot_re(&self, other: &ComplexImage) -> Result<f64> {
        self.t.dot(&other.t)
    }

    pub fn add(&self, other: &ComplexImage) -> Result<ComplexImage> {
        Ok(ComplexImage {
            t: self.t.add(&other.t)?,
        })
    }

    pub fn sub(&self, other: &ComplexImage) -> Result<ComplexImage> {
        Ok(ComplexImage {
            t: self.t.sub(&other.t)?,
        })
    }

    pub fn scale(&self, c: f64) -> ComplexImage {
        ComplexImage { t: self.t.scale(c) }
    }

    pub fn axpy_mut(&mut self, a: f64, x: &ComplexImage) -> Result<()> {
        self.t.axpy_mut(a, &x.t)
    }

    /// Elementwise complex product with `other`.
    pub fn cmul(&self, other: &ComplexImage) -> Result<ComplexImage> {
        self.cmul_impl(other, false)
    }

    /// Elementwise complex product with `conj(other)`.
    pub fn cmul_conj(&self, other: &ComplexImage) -> Result<ComplexImage> {
        self.cmul_impl(other, true)
    }

    fn cmul_impl(&self, other: &ComplexImage, conj: bool) -> Result<ComplexImage> {
        if self.t.shape() != other.t.shape() {
            return Err(Error::ShapeMismatch {
                op: "cmul",
                lhs: self.t.shape().to_vec(),
                rhs: other.t.shape().to_vec(),
            });
        }
        let hw = self.h() * self.w();
        let (ar, ai) = self.t.data().split_at(hw);
        let (br0, bi0) = other.t.data().split_at(hw);
        let sign = if conj { -1.0 } else { 1.0 };
        let mut out = vec![0.0; 2 * hw];
        let (or_, oi) = out.split_at_mut(hw);
        for i in 0..hw {
            let (br, bi) = (br0[i], sign * bi0[i]);
            or_[i] = ar[i] * br - ai[i] * bi;
            oi[i] = ar[i] * bi + ai[i] * br;
        }
        Ok(ComplexImage {
            t: Tensor::from_vec(self.t.shape(), out).expect("same length"),
        })
    }

    /// Pixelwise modulus, shape `[h, w]`.
    pub fn magnitude(&self) -> Tensor {
        let hw = self.h() * self.w();
        let (re, im) = self.t.data().split_at(hw);
        let mag = re
            .iter()
            .zip(im)
            .map(|(r, i)| r.hypot(*i))
            .collect::<Vec<_>>();
        Tensor::from_vec(&[self.h(), self.w()], mag).expect("hw entries")
    }

    pub fn to_complex_vec(&self) -> Vec<Complex64> {
        let hw = self.h() * self.w();
        let (re, im) = self.t.data().split_at(hw);
        re.iter()
            .zip(im)
            .map(|(r, i)| Complex64::new(*r, *i))
            .collect()
    }

    pub fn from_complex(h: usize, w: usize, buf: &[Complex64]) -> Self {
        assert_eq!(buf.len(), h * w);
        let mut data = vec![0.0; 2 * h * w];
        for (i, c) in buf.iter().enumerate() {
            data[i] = c.re;
            data[h * w + i] = c.im;
        }
        ComplexImage {
            t: Tensor::from_vec(&[2, h, w], data).expect("2hw entries"),
        }
    }
}

/// Undersampled k-space measurements, `[coils, 2, h, w]`, zero at masked-out
/// locations, bound to the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    samples: Tensor,
    model_id: u64,
}

impl KSpaceData {
    /// Validates that samples vanish off the mask.
    pub fn new(samples: Tensor, mm: &MeasurementModel) -> Result<Self> {
        let shape = samples.shape().to_vec();
        if shape.len() != 4 || shape[0] != mm.coils() || shape[1] != 2 {
            return Err(Error::ShapeMismatch {
                op: "KSpaceData::new",
                lhs: shape,
                rhs: vec![mm.coils(), 2, mm.h(), mm.w()],
            });
        }
        if shape[2] != mm.h() || shape[3] != mm.w() {
            return Err(Error::ShapeMismatch {
                op: "KSpaceData::new",
                lhs: shape,
                rhs: vec![mm.coils(), 2, mm.h(), mm.w()],
            });
        }
        let hw = mm.h() * mm.w();
        let mask = mm.mask().data();
        for c in 0..mm.coils() {
            for ch in 0..2 {
                let off = (c * 2 + ch) * hw;
                for i in 0..hw {
                    if mask[i] == 0.0 && samples.data()[off + i] != 0.0 {
                        return Err(Error::invalid(
                            "k-space samples must be zero at masked-out locations",
                        ));
                    }
                }
            }
        }
        Ok(KSpaceData {
            samples,
            model_id: mm.id(),
        })
    }

    pub fn zeros(mm: &MeasurementModel) -> Self {
        KSpaceData {
            samples: Tensor::zeros(&[mm.coils(), 2, mm.h(), mm.w()]),
            model_id: mm.id(),
        }
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn model_id(&self) -> u64 {
        self.model_id
    }

    pub fn norm(&self) -> f64 {
        self.samples.norm()
    }

    pub fn add(&self, other: &KSpaceData) -> Result<KSpaceData> {
        if self.model_id != other.model_id {
            return Err(Error::ModelMismatch);
        }
        Ok(KSpaceData {
            samples: self.samples.add(&other.samples)?,
            model_id: self.model_id,
        })
    }

    pub fn sub(&self, other: &KSpaceData) -> Result<KSpaceData> {
        if self.model_id != other.model_id {
            return Err(Error::ModelMismatch);
        }
        Ok(KSpaceData {
            samples: self.samples.sub(&other.samples)?,
            model_id: self.model_id,
        })
    }

    pub fn scale(&self, c: f64) -> KSpaceData {
        KSpaceData {
            samples: self.samples.scale(c),
            model_id: self.model_id,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Binary k-space mask, normalized coil sensitivities and the noise level:
/// everything needed to realize the measurement operator and its adjoint.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    mask: Tensor,
    coil_maps: Vec<ComplexImage>,
    noise_sigma: f64,
    id: u64,
}

impl MeasurementModel {
    pub fn new(mask: Tensor, coil_maps: Vec<ComplexImage>, noise_sigma: f64) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "MeasurementModel::new(mask)",
                lhs: mask.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        if coil_maps.is_empty() {
            return Err(Error::invalid("need at least one coil map"));
        }
        if noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let hw = h * w;
        let mut sums = vec![0.0f64; hw];
        for s in &coil_maps {
            if s.h() != h || s.w() != w {
                return Err(Error::ShapeMismatch {
                    op: "MeasurementModel::new(coil_maps)",
                    lhs: s.tensor().shape().to_vec(),
                    rhs: vec![2, h, w],
                });
            }
            let (re, im) = s.tensor().data().split_at(hw);
            for i in 0..hw {
                sums[i] += re[i] * re[i] + im[i] * im[i];
            }
        }
        let worst = sums.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        if worst > 1e-8 {
            return Err(Error::invalid(format!(
                "coil maps are not pixelwise normalized (max |sum-1| = {worst:.3e})"
            )));
        }

        let mut bytes = Vec::with_capacity(8 * (hw + 2 * hw * coil_maps.len() + 1));
        for v in mask.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for s in &coil_maps {
            for v in s.tensor().data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.extend_from_slice(&noise_sigma.to_le_bytes());
        let id = fnv1a(&bytes);

        Ok(MeasurementModel {
            mask,
            coil_maps,
            noise_sigma,
            id,
        })
    }

    /// Single fully sampled coil with unit sensitivity: the operator reduces
    /// to the unitary 2-d FFT.
    pub fn identity(h: usize, w: usize) -> Self {
        let mask = Tensor::filled(&[h, w], 1.0);
        let mut map = ComplexImage::zeros(h, w);
        map.tensor_mut().data_mut()[..h * w].fill(1.0);
        MeasurementModel::new(mask, vec![map], 0.0).expect("valid by construction")
    }

    pub fn h(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn coils(&self) -> usize {
        self.coil_maps.len()
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn coil_map(&self, c: usize) -> &ComplexImage {
        &self.coil_maps[c]
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    fn check_image(&self, x: &ComplexImage, op: &'static str) -> Result<()> {
        if x.h() != self.h() || x.w() != self.w() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.tensor().shape().to_vec(),
                rhs: vec![2, self.h(), self.w()],
            });
        }
        Ok(())
    }

    /// Measurement operator: per coil, mask the unitary FFT of the
    /// sensitivity-weighted image.
    pub fn forward(&self, x: &ComplexImage) -> Result<KSpaceData> {
        self.check_image(x, "forward")?;
        let (h, w) = (self.h(), self.w());
        let hw = h * w;
        let mut samples = vec![0.0; self.coils() * 2 * hw];
        for (c, map) in self.coil_maps.iter().enumerate() {
            let weighted = x.cmul(map)?;
            let mut buf = weighted.to_complex_vec();
            fft2_unitary(&mut buf, h, w, false);
            let off = c * 2 * hw;
            for (i, (v, m)) in buf.iter().zip(self.mask.data()).enumerate() {
                samples[off + i] = v.re * m;
                samples[off + hw + i] = v.im * m;
            }
        }
        Ok(KSpaceData {
            samples: Tensor::from_vec(&[self.coils(), 2, h, w], samples).expect("length checked"),
            model_id: self.id,
        })
    }

    /// Adjoint operator: conjugate-sensitivity-weighted inverse FFT of the
    /// masked samples, summed over coils.
    pub fn adjoint(&self, b: &KSpaceData) -> Result<ComplexImage> {
        if b.model_id != self.id {
            return Err(Error::ModelMismatch);
        }
        self.adjoint_raw(b.samples())
    }

    /// Adjoint applied to a raw `[coils, 2, h, w]` tensor. Masks first, so it
    /// is safe on arbitrary k-space-shaped inputs.
    pub fn adjoint_raw(&self, samples: &Tensor) -> Result<ComplexImage> {
        let (h, w) = (self.h(), self.w());
        let hw = h * w;
        if samples.shape() != [self.coils(), 2, h, w] {
            return Err(Error::ShapeMismatch {
                op: "adjoint",
                lhs: samples.shape().to_vec(),
                rhs: vec![self.coils(), 2, h, w],
            });
        }
        let mut acc = ComplexImage::zeros(h, w);
        let data = samples.data();
        let mut buf = vec![Complex64::default(); hw];
        for (c, map) in self.coil_maps.iter().enumerate() {
            let off = c * 2 * hw;
            for i in 0..hw {
                let m = self.mask.data()[i];
                buf[i] = Complex64::new(data[off + i] * m, data[off + hw + i] * m);
            }
            fft2_unitary(&mut buf, h, w, true);
            let img = ComplexImage::from_complex(h, w, &buf);
            acc.axpy_mut(1.0, &img.cmul_conj(map)?)?;
        }
        Ok(acc)
    }

    /// Normal operator `adjoint(forward(x))`.
    pub fn normal(&self, x: &ComplexImage) -> Result<ComplexImage> {
        let b = self.forward(x)?;
        self.adjoint(&b)
    }

    /// Zeroes `raw` off the sampling mask and binds it to this model.
    pub fn mask_kspace(&self, raw: &Tensor) -> Result<KSpaceData> {
        let (h, w) = (self.h(), self.w());
        let hw = h * w;
        if raw.shape() != [self.coils(), 2, h, w] {
            return Err(Error::ShapeMismatch {
                op: "mask_kspace",
                lhs: raw.shape().to_vec(),
                rhs: vec![self.coils(), 2, h, w],
            });
        }
        let mut out = raw.clone();
        let data = out.data_mut();
        for c in 0..self.coils() {
            for ch in 0..2 {
                let off = (c * 2 + ch) * hw;
                for i in 0..hw {
                    data[off + i] *= self.mask.data()[i];
                }
            }
        }
        Ok(KSpaceData {
            samples: out,
            model_id: self.id,
        })
    }
}

/// Regularized least-squares reconstruction: solves
/// `(A'A + mu I) x = A' b` by conjugate gradient to relative residual `tol`.
pub fn sense_init(
    b: &KSpaceData,
    mm: &MeasurementModel,
    mu: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ComplexImage> {
    if mu < 0.0 {
        return Err(Error::invalid("sense mu must be >= 0"));
    }
    let undersampled = mm.mask.data().iter().any(|v| *v == 0.0);
    if undersampled && mu == 0.0 {
        return Err(Error::invalid(
            "sense mu must be > 0 when the mask undersamples",
        ));
    }
    let rhs = mm.adjoint(b)?;
    let sol = cg_solve(
        |t: &Tensor| {
            let x = ComplexImage::new(t.clone())?;
            let mut y = mm.normal(&x)?;
            y.axpy_mut(mu, &x)?;
            Ok(y.into_tensor())
        },
        rhs.tensor(),
        tol,
        max_iter,
    )?;
    ComplexImage::new(sol)
}

/// Smooth elliptical bumps with a random complex phase ramp, max modulus
/// normalized to one.
pub fn generate_phantom(h: usize, w: usize, seed: u64) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let bumps = 6 + (rng.gen::<u32>() % 4) as usize;
    let hw = h * w;
    let mut mag = vec![0.0f64; hw];
    for _ in 0..bumps {
        let amp: f64 = 0.3 + 0.7 * rng.gen::<f64>();
        let cy = h as f64 * (0.2 + 0.6 * rng.gen::<f64>());
        let cx = w as f64 * (0.2 + 0.6 * rng.gen::<f64>());
        let ry = h as f64 * (0.08 + 0.22 * rng.gen::<f64>());
        let rx = w as f64 * (0.08 + 0.22 * rng.gen::<f64>());
        let phi: f64 = std::f64::consts::PI * rng.gen::<f64>();
        let (s, c) = phi.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let q = (u / rx).powi(2) + (v / ry).powi(2);
                mag[y * w + x] += amp * (-q).exp();
            }
        }
    }
    let peak = mag.iter().fold(0.0f64, |m, v| m.max(*v));
    for v in &mut mag {
        *v /= peak;
    }
    let fx = rng.gen::<f64>() - 0.5;
    let fy = rng.gen::<f64>() - 0.5;
    let phi0 = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let mut data = vec![0.0; 2 * hw];
    for y in 0..h {
        for x in 0..w {
            let phase = 2.0 * std::f64::consts::PI * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                + phi0;
            let i = y * w + x;
            data[i] = mag[i] * phase.cos();
            data[hw + i] = mag[i] * phase.sin();
        }
    }
    ComplexImage::new(Tensor::from_vec(&[2, h, w], data).expect("2hw entries")).expect("valid shape")
}

/// Low-order smooth complex coil sensitivities, normalized so the pixelwise
/// sum of squared moduli is exactly one.
pub fn generate_coil_maps(coils: usize, h: usize, w: usize, seed: u64) -> Vec<ComplexImage> {
    assert!(coils >= 1, "need at least one coil");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(2));
    let hw = h * w;
    let mut raw = vec![vec![Complex64::default(); hw]; coils];
    let radius = 0.45 * (h.min(w) as f64);
    let width = 0.8 * (h.max(w) as f64);
    for (c, buf) in raw.iter_mut().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * (c as f64 / coils as f64) + 0.3 * rng.gen::<f64>();
        let cy = h as f64 / 2.0 + radius * angle.sin();
        let cx = w as f64 / 2.0 + radius * angle.cos();
        let p0: f64 = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
        let py = 0.5 * (rng.gen::<f64>() - 0.5);
        let px = 0.5 * (rng.gen::<f64>() - 0.5);
        for y in 0..h {
            for x in 0..w {
                let d2 = ((y as f64 - cy) / width).powi(2) + ((x as f64 - cx) / width).powi(2);
                let a = (-d2).exp() + 1e-3;
                let phase = p0
                    + 2.0 * std::f64::consts::PI * (py * y as f64 / h as f64 + px * x as f64 / w as f64);
                buf[y * w + x] = Complex64::from_polar(a, phase);
            }
        }
    }
    for i in 0..hw {
        let s: f64 = raw.iter().map(|b| b[i].norm_sqr()).sum();
        let inv = 1.0 / s.sqrt();
        for b in raw.iter_mut() {
            b[i] *= inv;
        }
    }
    raw.into_iter()
        .map(|b| ComplexImage::from_complex(h, w, &b))
        .collect()
}

/// Variable-density random sampling mask with an always-kept 8x8 low-frequency
/// block (wrapped around DC) and an exact kept-sample count of
/// `round(h*w/accel)`.
pub fn generate_vd_mask(h: usize, w: usize, accel: f64, seed: u64) -> Result<Tensor> {
    if accel < 1.0 {
        return Err(Error::invalid("acceleration must be >= 1"));
    }
    let hw = h * w;
    let target = ((hw as f64) / accel).round() as usize;
    let center = center_block(h, w);
    if target < center.len() {
        return Err(Error::invalid(format!(
            "acceleration {accel} keeps {target} samples, fewer than the {} in the fully sampled center",
            center.len()
        )));
    }
    let mut keep = vec![false; hw];
    for &i in &center {
        keep[i] = true;
    }
    let remaining = target - center.len();
    if remaining > 0 {
        // Weighted sampling without replacement: top `remaining` keys of
        // u^(1/w) with Gaussian low-frequency weights.
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(3));
        let sig_y = h as f64 / 5.0;
        let sig_x = w as f64 / 5.0;
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(hw - center.len());
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // Candidate keys must be drawn for every position in a fixed
                // order so the mask is a pure function of the seed.
                let u: f64 = rng.gen::<f64>();
                if keep[i] {
                    continue;
                }
                let dy = y.min(h - y) as f64;
                let dx = x.min(w - x) as f64;
                let wgt = (-0.5 * ((dy / sig_y).powi(2) + (dx / sig_x).powi(2))).exp() + 1e-12;
                keyed.push((u.powf(1.0 / wgt), i));
            }
        }
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite keys").then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(remaining) {
            keep[i] = true;
        }
    }
    let data = keep.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[h, w], data)
}

/// 1-d variant: full columns are kept, mirroring phase-encode undersampling;
/// an 8-line low-frequency band is always kept.
pub fn generate_vd_mask_1d(h: usize, w: usize, accel: f64, seed: u64) -> Result<Tensor> {
    if accel < 1.0 {
        return Err(Error::invalid("acceleration must be >= 1"));
    }
    let target = ((w as f64) / accel).round() as usize;
    let band: Vec<usize> = (0..w).filter(|&x| x.min(w - x) < 4).collect();
    if target < band.len() {
        return Err(Error::invalid(format!(
            "acceleration {accel} keeps {target} lines, fewer than the {} center lines",
            band.len()
        )));
    }
    let mut keep = vec![false; w];
    for &x in &band {
        keep[x] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(4));
    let sig_x = w as f64 / 5.0;
    let mut keyed: Vec<(f64, usize)> = Vec::new();
    for x in 0..w {
        let u: f64 = rng.gen::<f64>();
        if keep[x] {
            continue;
        }
        let dx = x.min(w - x) as f64;
        let wgt = (-0.5 * (dx / sig_x).powi(2)).exp() + 1e-12;
        keyed.push((u.powf(1.0 / wgt), x));
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite keys").then(a.1.cmp(&b.1)));
    for &(_, x) in keyed.iter().take(target - band.len()) {
        keep[x] = true;
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if keep[x] {
                data[y * w + x] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[h, w], data)
}

fn center_block(h: usize, w: usize) -> Vec<usize> {
    // 8x8 low-frequency block around DC in unshifted FFT coordinates
    // (or the full axis if it is shorter than 8).
    let ys: Vec<usize> = (0..h).filter(|&y| y.min(h - y) < 4 || h <= 8).collect();
    let xs: Vec<usize> = (0..w).filter(|&x| x.min(w - x) < 4 || w <= 8).collect();
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(y * w + x);
        }
    }
    out
}

/// Adds i.i.d. circular Gaussian noise (std `sigma` per real channel) at
/// sampled k-space locations only.
pub fn add_noise(b: &KSpaceData, mm: &MeasurementModel, sigma: f64, seed: u64) -> Result<KSpaceData> {
    if b.model_id() != mm.id() {
        return Err(Error::ModelMismatch);
    }
    if sigma == 0.0 {
        return Ok(b.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(5));
    let hw = mm.h() * mm.w();
    let mut samples = b.samples.clone();
    let data = samples.data_mut();
    for c in 0..mm.coils() {
        for i in 0..hw {
            // Draw both channels unconditionally to keep the stream aligned
            // with the mask layout.
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            if mm.mask.data()[i] == 1.0 {
                data[c * 2 * hw + i] += sigma * nr;
                data[c * 2 * hw + hw + i] += sigma * ni;
            }
        }
    }
    Ok(KSpaceData {
        samples,
        model_id: b.model_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::materialize;

    fn random_model(h: usize, w: usize, coils: usize, accel: f64, seed: u64) -> MeasurementModel {
        let mask = generate_vd_mask(h, w, accel, seed).unwrap();
        let maps = generate_coil_maps(coils, h, w, seed);
        MeasurementModel::new(mask, maps, 0.0).unwrap()
    }

    #[test]
    fn full_mask_single_coil_preserves_norm() {
        let mm = MeasurementModel::identity(8, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = ComplexImage::randn(8, 8, &mut rng);
        let b = mm.forward(&x).unwrap();
        assert!((b.norm() - x.norm()).abs() < 1e-12 * x.norm());
    }

    #[test]
    fn forward_of_zero_is_zero() {
        let mm = random_model(8, 8, 3, 2.0, 5);
        let b = mm.forward(&ComplexImage::zeros(8, 8)).unwrap();
        assert_eq!(b.norm(), 0.0);
    }

    #[test]
    fn adjoint_identity_holds_over_many_pairs() {
        for seed in 0..4u64 {
            let mm = random_model(8, 6, 3, 2.0, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..25 {
                let x = ComplexImage::randn(8, 6, &mut rng);
                let y_raw = Tensor::randn(&[3, 2, 8, 6], &mut rng);
                let y = mm.mask_kspace(&y_raw).unwrap();
                let ax = mm.forward(&x).unwrap();
                let aty = mm.adjoint(&y).unwrap();
                let lhs = ax.samples().dot(y.samples()).unwrap();
                let rhs = x.dot_re(&aty).unwrap();
                assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_never_expands_norm() {
        for seed in 0..3u64 {
            let mm = random_model(8, 8, 4, 3.0, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 30);
            for _ in 0..20 {
                let x = ComplexImage::randn(8, 8, &mut rng);
                let b = mm.forward(&x).unwrap();
                assert!(b.norm() <= x.norm() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn normal_is_identity_for_full_mask_single_coil() {
        let mm = MeasurementModel::identity(6, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = ComplexImage::randn(6, 6, &mut rng);
        let y = mm.normal(&x).unwrap();
        assert!(x.dist(&y).unwrap() < 1e-12 * x.norm());
    }

    #[test]
    fn normal_spectrum_lies_in_unit_interval() {
        let mm = random_model(8, 8, 3, 2.0, 9);
        let apply = |t: &Tensor| {
            mm.normal(&ComplexImage::new(t.clone()).unwrap())
                .unwrap()
                .into_tensor()
        };
        let mat = materialize(&apply, &[2, 8, 8], &[2, 8, 8]);
        let sym = (&mat + mat.transpose()).scale(0.5);
        let eigs = nalgebra::SymmetricEigen::new(sym).eigenvalues;
        for e in eigs.iter() {
            assert!(*e >= -1e-10 && *e <= 1.0 + 1e-10, "eigenvalue {e} outside [0,1]");
        }
    }

    #[test]
    fn normal_is_projection_for_single_coil_any_mask() {
        let mask = generate_vd_mask(8, 8, 2.0, 3).unwrap();
        let mut map = ComplexImage::zeros(8, 8);
        map.tensor_mut().data_mut()[..64].fill(1.0);
        let mm = MeasurementModel::new(mask, vec![map], 0.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = ComplexImage::randn(8, 8, &mut rng);
        let once = mm.normal(&x).unwrap();
        let twice = mm.normal(&once).unwrap();
        assert!(once.dist(&twice).unwrap() < 1e-12 * once.norm().max(1.0));
    }

    #[test]
    fn sense_recovers_exactly_with_full_sampling() {
        let mm = MeasurementModel::identity(8, 8);
        let x = generate_phantom(8, 8, 7);
        let b = mm.forward(&x).unwrap();
        let rec = sense_init(&b, &mm, 0.0, 1e-10, 50).unwrap();
        assert!(rec.dist(&x).unwrap() < 1e-8 * x.norm());
    }

    #[test]
    fn sense_of_zero_data_is_zero() {
        let mm = random_model(8, 8, 2, 2.0, 11);
        let b = KSpaceData::zeros(&mm);
        let rec = sense_init(&b, &mm, 1e-2, 1e-8, 100).unwrap();
        assert_eq!(rec.norm(), 0.0);
    }

    #[test]
    fn sense_requires_regularization_when_undersampled() {
        let mm = random_model(8, 8, 2, 2.0, 12);
        let b = KSpaceData::zeros(&mm);
        assert!(sense_init(&b, &mm, 0.0, 1e-8, 100).is_err());
    }

    #[test]
    fn sense_matches_dense_solve() {
        let mm = random_model(8, 8, 2, 2.0, 13);
        let x = generate_phantom(8, 8, 14);
        let b = mm.forward(&x).unwrap();
        let mu = 1e-2;
        let rec = sense_init(&b, &mm, mu, 1e-12, 400).unwrap();

        let apply = |t: &Tensor| {
            let img = ComplexImage::new(t.clone()).unwrap();
            let mut y = mm.normal(&img).unwrap();
            y.axpy_mut(mu, &img).unwrap();
            y.into_tensor()
        };
        let mat = materialize(&apply, &[2, 8, 8], &[2, 8, 8]);
        let rhs = mm.adjoint(&b).unwrap().into_tensor();
        let dense = mat
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(rhs.data()))
            .expect("SPD system");
        let mut err: f64 = 0.0;
        for (a, b2) in rec.tensor().data().iter().zip(dense.iter()) {
            err = err.max((a - b2).abs());
        }
        assert!(err < 1e-8, "CG vs dense disagree by {err:.3e}");
    }

    #[test]
    fn accel_one_keeps_every_sample() {
        let mask = generate_vd_mask(16, 16, 1.0, 0).unwrap();
        assert!(mask.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn coil_maps_are_normalized() {
        let maps = generate_coil_maps(5, 16, 12, 3);
        let hw = 16 * 12;
        for i in 0..hw {
            let s: f64 = maps
                .iter()
                .map(|m| {
                    let (re, im) = m.tensor().data().split_at(hw);
                    re[i] * re[i] + im[i] * im[i]
                })
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn four_fold_mask_keeps_about_a_quarter() {
        let mask = generate_vd_mask(64, 64, 4.0, 21).unwrap();
        let frac = mask.data().iter().sum::<f64>() / (64.0 * 64.0);
        assert!((0.225..=0.275).contains(&frac), "kept fraction {frac}");
    }

    #[test]
    fn excessive_acceleration_is_rejected() {
        assert!(generate_vd_mask(16, 16, 100.0, 0).is_err());
    }

    #[test]
    fn generators_are_pure_functions_of_seed() {
        assert_eq!(generate_phantom(16, 16, 5), generate_phantom(16, 16, 5));
        assert_eq!(
            generate_vd_mask(16, 16, 4.0, 5).unwrap(),
            generate_vd_mask(16, 16, 4.0, 5).unwrap()
        );
        let a = generate_coil_maps(3, 8, 8, 5);
        let b = generate_coil_maps(3, 8, 8, 5);
        assert_eq!(a, b);
        let mm = random_model(8, 8, 2, 2.0, 6);
        let x = generate_phantom(8, 8, 6);
        let clean = mm.forward(&x).unwrap();
        assert_eq!(
            add_noise(&clean, &mm, 0.05, 9).unwrap(),
            add_noise(&clean, &mm, 0.05, 9).unwrap()
        );
    }

    #[test]
    fn noise_respects_the_mask() {
        let mm = random_model(8, 8, 2, 2.0, 6);
        let b = KSpaceData::zeros(&mm);
        let noisy = add_noise(&b, &mm, 0.1, 3).unwrap();
        KSpaceData::new(noisy.samples().clone(), &mm).expect("still mask-consistent");
    }

    #[test]
    fn kspace_binding_is_checked() {
        let mm1 = random_model(8, 8, 2, 2.0, 1);
        let mm2 = random_model(8, 8, 2, 2.0, 2);
        let b = KSpaceData::zeros(&mm1);
        assert!(matches!(mm2.adjoint(&b), Err(Error::ModelMismatch)));
    }

    #[test]
    fn mask_1d_keeps_full_columns() {
        let mask = generate_vd_mask_1d(16, 32, 4.0, 8).unwrap();
        for x in 0..32 {
            let col: Vec<f64> = (0..16).map(|y| mask.data()[y * 32 + x]).collect();
            assert!(col.iter().all(|v| *v == col[0]));
        }
        let kept = mask.data().iter().sum::<f64>() / 16.0;
        assert!((kept - 8.0).abs() < 0.5);
    }
}
