//! Dense tensors, the on-disk tensor format, the scene manifest, and the
//! seeded RNG. Everything downstream builds on these, so the rules here are
//! strict: tensor files round-trip bit-exactly, manifests are plain JSON with
//! deterministic key order, and the RNG produces the same sequence for the
//! same (seed, stream) on every platform.
//!
//! File layout, little-endian throughout:
//!   magic "LT3D" | version u8 = 1 | dtype u8 (0 = f32, 1 = f64)
//!   | ndim u8 (1..=4) | pad u8 = 0 | ndim x u64 extents | payload row-major
//!
//! Why a custom format: the pipeline's determinism tests hash output
//! directories, so serialization must not depend on library version quirks.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"LT3D";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Element type of tensors and of the autodiff tape. f32 is the working
/// precision; f64 exists for finite-difference gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxs(self, o: Self) -> Self;
    fn mins(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
    fn infinity() -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// c = a @ b + beta * c, row-major contiguous. `ta`/`tb` read the operand
    /// transposed without copying.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $bytes:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;
            const BYTES: usize = $bytes;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxs(self, o: Self) -> Self {
                self.max(o)
            }
            fn mins(self, o: Self) -> Self {
                self.min(o)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn infinity() -> Self {
                <$t>::INFINITY
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().unwrap())
            }

            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4, matrixmultiply::sgemm);
impl_scalar!(f64, Dtype::F64, 8, matrixmultiply::dgemm);

/// Dense row-major tensor, rank 1..=4. Invariant: every extent >= 1 and
/// data.len() == product(dims).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 4 && dims.iter().all(|&d| d >= 1),
            "bad tensor dims {dims:?}"
        );
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims {dims:?} do not match data length {}",
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::from_vec(dims, vec![S::ZERO; dims.iter().product()])
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        Self::from_vec(dims, vec![v; dims.iter().product()])
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer under new dims of identical volume.
    pub fn reshaped(&self, dims: &[usize]) -> Self {
        Self::from_vec(dims, self.data.clone())
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> S {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        debug_assert_eq!(self.rank(), 2);
        let c = self.dims[1];
        self.data[i * c + j] = v;
    }

    #[inline]
    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: S) {
        debug_assert_eq!(self.rank(), 3);
        let (d1, d2) = (self.dims[1], self.dims[2]);
        self.data[(i * d1 + j) * d2 + k] = v;
    }

    /// Row `i` of a rank-2 tensor (or the i-th innermost slab generally).
    pub fn row(&self, i: usize) -> &[S] {
        let w: usize = self.dims[1..].iter().product();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + t.len() * S::BYTES);
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.push(TENSOR_VERSION);
    buf.push(S::DTYPE.code());
    buf.push(t.rank() as u8);
    buf.push(0);
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let bad = |reason: String| Error::TensorFormat {
        path: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(bad(format!("only {} bytes, header needs 8", bytes.len())));
    }
    if bytes[0..4] != TENSOR_MAGIC {
        return Err(bad(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != S::DTYPE.code() {
        return Err(bad(format!(
            "dtype code {} does not match requested {:?}",
            bytes[5],
            S::DTYPE
        )));
    }
    let ndim = bytes[6] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(bad(format!("ndim {ndim} outside 1..=4")));
    }
    if bytes[7] != 0 {
        return Err(bad(format!("nonzero pad byte {}", bytes[7])));
    }
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated extents".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(bad(format!("zero extent at axis {i}")));
        }
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let expected = header + count * S::BYTES;
    if bytes.len() != expected {
        return Err(bad(format!(
            "payload length {} does not match dims {:?} (expected file size {})",
            bytes.len() - header,
            dims,
            expected
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header + i * S::BYTES;
        data.push(S::read_le(&bytes[off..off + S::BYTES]));
    }
    Ok(Tensor::from_vec(&dims, data))
}

pub(crate) const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-mode RNG. Identical (seed, stream) gives an
/// identical sequence on every platform; distinct streams are decorrelated,
/// so each ray, view, or scene can own a derived stream without coordination.
#[derive(Debug, Clone)]
pub struct Rng {
    chacha: rand_chacha::ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        use rand_core::SeedableRng;
        let mut chacha = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        chacha.set_stream(stream);
        Rng {
            chacha,
            seed,
            stream,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh stream keyed by this stream and `salt`. Chain to key by tuples.
    pub fn derive(&self, salt: u64) -> Rng {
        let mixed = splitmix64(self.stream ^ salt.wrapping_mul(SPLITMIX_GAMMA));
        Rng::new(self.seed, mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let i = (self.uniform() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call so the
    /// stream position does not depend on call history.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Camera pose and intrinsics as stored in scene manifests. `r` is the
/// world-to-camera rotation, row-major; camera-frame points are r * x + t.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub r: [f64; 9],
    pub t: [f64; 3],
}

/// Per-view file references, relative to the scene directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewRecord {
    pub rgb: String,
    pub depth: String,
    pub labels: String,
    /// operator id -> cached feature map path
    pub features: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneManifest {
    pub scene_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub bound_radius: f64,
    pub n_labels: usize,
    pub cameras: Vec<CameraRecord>,
    pub views: Vec<ViewRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl SceneManifest {
    pub fn save(&self, scene_dir: impl AsRef<Path>) -> Result<()> {
        let dir = scene_dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        fs::write(&path, json.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(scene_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = scene_dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        m.validate(&path.display().to_string())?;
        Ok(m)
    }

    fn validate(&self, path: &str) -> Result<()> {
        let fail = |reason: String| Error::Manifest {
            path: path.to_string(),
            reason,
        };
        if self.views.is_empty() {
            return Err(fail("no views".into()));
        }
        if self.cameras.len() != self.views.len() {
            return Err(fail(format!(
                "{} cameras for {} views",
                self.cameras.len(),
                self.views.len()
            )));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if c.width != self.width || c.height != self.height {
                return Err(fail(format!(
                    "camera {i} is {}x{}, scene is {}x{}",
                    c.width, c.height, self.width, self.height
                )));
            }
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(fail(format!("bad near/far {} {}", self.near, self.far)));
        }
        Ok(())
    }

    /// Checks that every referenced tensor file exists under `scene_dir`.
    pub fn validate_files(&self, scene_dir: impl AsRef<Path>) -> Result<()> {
        let dir = scene_dir.as_ref();
        for (i, v) in self.views.iter().enumerate() {
            for rel in [&v.rgb, &v.depth, &v.labels]
                .into_iter()
                .chain(v.features.values())
            {
                let p = dir.join(rel);
                if !p.is_file() {
                    return Err(Error::Manifest {
                        path: dir.join(MANIFEST_FILE).display().to_string(),
                        reason: format!("view {i} references missing file {rel}"),
                    });
                }
            }
        }
        Ok(())
    }
}
