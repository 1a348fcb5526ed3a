//! Channel generation and system-model construction: IID Rayleigh and
//! Kronecker-correlated draws, multipath tap realizations, per-subcarrier
//! and blocked-circulant system matrices, real decomposition, calibrated
//! AWGN, and the tap-file format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Hard cap on the complex dimensions of the blocked-circulant system.
pub const MAX_BLOCK_DIM: usize = 8192;

/// Deterministic per-stream RNG split. The 32-byte ChaCha seed is the
/// little-endian master seed, the stream index, and a fixed tag; any
/// (seed, stream) pair therefore yields the same generator regardless of
/// scheduling, which keeps parallel Monte-Carlo reproducible.
pub fn trial_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    seed[16..24].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One multipath MIMO realization: `L` tap matrices of shape `nr x nt`.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    taps: Vec<DMatrix<Complex64>>,
}

impl ChannelRealization {
    pub fn new(taps: Vec<DMatrix<Complex64>>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidInput("a realization needs at least one tap".into()));
        }
        let (nr, nt) = (taps[0].nrows(), taps[0].ncols());
        if nr == 0 || nt == 0 {
            return Err(Error::InvalidInput("tap matrices must be non-empty".into()));
        }
        if taps.iter().any(|h| h.nrows() != nr || h.ncols() != nt) {
            return Err(Error::ShapeMismatch("all taps must share the same shape".into()));
        }
        Ok(Self { taps })
    }

    pub fn nr(&self) -> usize {
        self.taps[0].nrows()
    }

    pub fn nt(&self) -> usize {
        self.taps[0].ncols()
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[DMatrix<Complex64>] {
        &self.taps
    }

    /// Total tap energy `sum_l ||H_l||_F^2`.
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|h| h.norm_squared()).sum()
    }
}

/// IID Rayleigh matrix with entries CN(0, 1/nr).
pub fn sample_rayleigh(nr: usize, nt: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    let s = (0.5 / nr as f64).sqrt();
    DMatrix::from_fn(nr, nt, |_, _| {
        Complex64::new(s * standard_normal(rng), s * standard_normal(rng))
    })
}

/// Multipath realization with `l` taps of equal average power; per-entry
/// tap variance 1/(nr*l) keeps every per-subcarrier matrix CN(0, 1/nr).
pub fn sample_multipath(
    nr: usize,
    nt: usize,
    l: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ChannelRealization> {
    let s = (0.5 / (nr * l) as f64).sqrt();
    let taps = (0..l)
        .map(|_| {
            DMatrix::from_fn(nr, nt, |_, _| {
                Complex64::new(s * standard_normal(rng), s * standard_normal(rng))
            })
        })
        .collect();
    ChannelRealization::new(taps)
}

/// Exponential correlation matrix with coefficient `rho`.
pub fn exp_correlation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi((j as i32 - i as i32).abs()))
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from roundoff are clamped at zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Applies receive/transmit Kronecker correlation to an IID draw:
/// `G = R_r^{1/2} U R_t^{1/2}` with exponential correlation matrices.
pub fn apply_kronecker(u: &DMatrix<Complex64>, rho: f64) -> Result<DMatrix<Complex64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("rho must lie in [0, 1), got {rho}")));
    }
    if rho == 0.0 {
        return Ok(u.clone());
    }
    let rr = sym_sqrt(&exp_correlation(u.nrows(), rho)).map(|v| Complex64::new(v, 0.0));
    let rt = sym_sqrt(&exp_correlation(u.ncols(), rho)).map(|v| Complex64::new(v, 0.0));
    Ok(&rr * u * &rt)
}

/// Per-subcarrier frequency-domain matrices
/// `G_n = sum_l H_l exp(-j 2 pi n l / nc)`.
pub fn frequency_channels(ch: &ChannelRealization, nc: usize) -> Result<Vec<DMatrix<Complex64>>> {
    if nc < ch.num_taps() {
        return Err(Error::InvalidInput(format!(
            "nc = {} must be at least the tap count {}",
            nc,
            ch.num_taps()
        )));
    }
    Ok((0..nc)
        .map(|n| {
            let mut g = DMatrix::zeros(ch.nr(), ch.nt());
            for (l, h) in ch.taps().iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * (n * l) as f64 / nc as f64;
                g += h * Complex64::from_polar(1.0, phase);
            }
            g
        })
        .collect())
}

/// Unitary DFT matrix: entry (m, n) = exp(-j 2 pi m n / nc)/sqrt(nc).
pub fn dft_matrix(nc: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (nc as f64).sqrt();
    DMatrix::from_fn(nc, nc, |m, n| {
        Complex64::from_polar(scale, -2.0 * std::f64::consts::PI * (m * n) as f64 / nc as f64)
    })
}

/// Kronecker product `a (x) I_n`.
pub fn kron_identity(a: &DMatrix<Complex64>, n: usize) -> DMatrix<Complex64> {
    let mut out = DMatrix::zeros(a.nrows() * n, a.ncols() * n);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            for k in 0..n {
                out[(i * n + k, j * n + k)] = a[(i, j)];
            }
        }
    }
    out
}

/// Blocked system matrices for reception without a guard interval.
#[derive(Debug, Clone)]
pub struct CpFreeMatrices {
    /// Blocked-circulant multipath operator, `nc*nr x nc*nt`.
    pub h_tilde: DMatrix<Complex64>,
    /// Upper-right blocked-triangular interference matrix.
    pub a: DMatrix<Complex64>,
    /// Effective frequency-to-time system matrix `(h_tilde - a) * (F^H (x) I_nt)`.
    pub c: DMatrix<Complex64>,
}

/// Builds the blocked-circulant operator, the intersymbol-interference
/// matrix, and the effective system matrix for the guard-free model.
pub fn build_cpfree_matrices(ch: &ChannelRealization, nc: usize) -> Result<CpFreeMatrices> {
    let (nr, nt, l) = (ch.nr(), ch.nt(), ch.num_taps());
    if nc < l {
        return Err(Error::InvalidInput(format!("nc = {nc} must be at least the tap count {l}")));
    }
    if nc * nt > MAX_BLOCK_DIM || nc * nr > MAX_BLOCK_DIM {
        return Err(Error::InvalidInput(format!(
            "blocked system of {}x{} complex dims exceeds the cap {}",
            nc * nr,
            nc * nt,
            MAX_BLOCK_DIM
        )));
    }

    let mut h_tilde = DMatrix::zeros(nc * nr, nc * nt);
    let mut a = DMatrix::zeros(nc * nr, nc * nt);
    let set_block = |m: &mut DMatrix<Complex64>, bi: usize, bj: usize, h: &DMatrix<Complex64>| {
        let mut view = m.view_mut((bi * nr, bj * nt), (nr, nt));
        view.copy_from(h);
    };
    for bi in 0..nc {
        for (tap, h) in ch.taps().iter().enumerate() {
            // Circulant: block (bi, bj) holds tap (bi - bj) mod nc.
            let bj = (bi + nc - tap) % nc;
            set_block(&mut h_tilde, bi, bj, h);
            // Interference from the previous symbol: taps reaching past the
            // start of the current one, i.e. tap > bi, land in the top-right.
            if tap > bi {
                set_block(&mut a, bi, nc + bi - tap, h);
            }
        }
    }
    let f_tilde_h = kron_identity(&dft_matrix(nc).adjoint(), nt);
    let c = (&h_tilde - &a) * f_tilde_h;
    Ok(CpFreeMatrices { h_tilde, a, c })
}

/// Complex linear model `y = G u + noise` with a scenario tag.
#[derive(Debug, Clone)]
pub struct ComplexLinearSystem {
    pub g: DMatrix<Complex64>,
    pub label: String,
}

impl ComplexLinearSystem {
    pub fn new(g: DMatrix<Complex64>, label: impl Into<String>) -> Self {
        Self { g, label: label.into() }
    }

    pub fn y_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn u_dim(&self) -> usize {
        self.g.ncols()
    }
}

/// Real-valued decomposition of a complex linear model. `c` carries the
/// block structure [[Re, -Im], [Im, Re]] and `y` is stacked [Re; Im].
/// `sigma2` is the noise variance per complex dimension.
#[derive(Debug, Clone)]
pub struct RealLinearSystem {
    pub c: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma2: f64,
    pub u_truth: Option<DVector<f64>>,
}

/// Real block embedding of a complex matrix.
pub fn realify_matrix(g: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (m, q) = (g.nrows(), g.ncols());
    let mut c = DMatrix::zeros(2 * m, 2 * q);
    for i in 0..m {
        for j in 0..q {
            let v = g[(i, j)];
            c[(i, j)] = v.re;
            c[(i, j + q)] = -v.im;
            c[(i + m, j)] = v.im;
            c[(i + m, j + q)] = v.re;
        }
    }
    c
}

/// Stacks a complex vector as [Re; Im].
pub fn realify_vector(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Inverse of [`realify_vector`].
pub fn complexify_vector(v: &DVector<f64>) -> DVector<Complex64> {
    let n = v.len() / 2;
    DVector::from_fn(n, |i, _| Complex64::new(v[i], v[i + n]))
}

/// Real decomposition of a complex observation, carrying the noise
/// variance through unchanged.
pub fn realify(
    sys: &ComplexLinearSystem,
    y: &DVector<Complex64>,
    sigma2: f64,
) -> Result<RealLinearSystem> {
    if y.len() != sys.y_dim() {
        return Err(Error::ShapeMismatch(format!(
            "observation length {} does not match y_dim {}",
            y.len(),
            sys.y_dim()
        )));
    }
    Ok(RealLinearSystem {
        c: realify_matrix(&sys.g),
        y: realify_vector(y),
        sigma2,
        u_truth: None,
    })
}

/// Noise variance per complex dimension such that the expected receive
/// SNR equals `snr_db` for IID unit-energy symbols:
/// `sigma2 = ||G||_F^2 / (M * 10^(snr/10))`.
pub fn noise_variance_for_snr(g_norm_squared: f64, y_dim: usize, snr_db: f64) -> f64 {
    g_norm_squared / (y_dim as f64 * 10f64.powf(snr_db / 10.0))
}

/// Complex AWGN vector with per-entry variance `sigma2`.
pub fn awgn(dim: usize, sigma2: f64, rng: &mut ChaCha8Rng) -> DVector<Complex64> {
    let s = (sigma2 / 2.0).sqrt();
    DVector::from_fn(dim, |_, _| {
        Complex64::new(s * standard_normal(rng), s * standard_normal(rng))
    })
}

/// Transmits symbols through the system at a calibrated receive SNR and
/// returns the noisy observation together with the realized noise
/// variance (handed to the detector as perfect noise knowledge).
pub fn transmit(
    sys: &ComplexLinearSystem,
    u: &DVector<Complex64>,
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<Complex64>, f64)> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput(format!("snr_db must be finite, got {snr_db}")));
    }
    if u.len() != sys.u_dim() {
        return Err(Error::ShapeMismatch(format!(
            "symbol count {} does not match u_dim {}",
            u.len(),
            sys.u_dim()
        )));
    }
    let sigma2 = noise_variance_for_snr(sys.g.norm_squared(), sys.y_dim(), snr_db);
    let y = &sys.g * u + awgn(sys.y_dim(), sigma2, rng);
    Ok((y, sigma2))
}

/// Writes realizations in the tap-file format: a `nr,nt,L,count` header,
/// then one `realization,l,q,p,re,im` row per entry in realization-major,
/// then tap, then receive-row, then transmit-column order, with floats at
/// 17 significant digits.
pub fn save_taps(path: &Path, realizations: &[ChannelRealization]) -> Result<()> {
    let mut out = String::new();
    let (nr, nt, l) = match realizations.first() {
        Some(ch) => (ch.nr(), ch.nt(), ch.num_taps()),
        None => return Err(Error::InvalidInput("cannot save an empty realization list".into())),
    };
    if realizations.iter().any(|ch| ch.nr() != nr || ch.nt() != nt || ch.num_taps() != l) {
        return Err(Error::ShapeMismatch("all realizations must share nr, nt, L".into()));
    }
    writeln!(out, "{nr},{nt},{l},{}", realizations.len()).unwrap();
    for (r, ch) in realizations.iter().enumerate() {
        for (tap, h) in ch.taps().iter().enumerate() {
            for q in 0..nr {
                for p in 0..nt {
                    let v = h[(q, p)];
                    writeln!(out, "{r},{tap},{q},{p},{:.16e},{:.16e}", v.re, v.im).unwrap();
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    field: &str,
    what: &str,
    path: &str,
    line: usize,
) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("cannot parse {what} from `{field}`"),
    })
}

/// Reads realizations from the tap-file format. Rows may appear in any
/// order; every (realization, l, q, p) slot must appear exactly once.
pub fn load_taps(path: &Path) -> Result<Vec<ChannelRealization>> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "missing header line".into(),
    })?;
    let head: Vec<&str> = header.split(',').collect();
    if head.len() != 4 {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("header must be `nr,nt,L,count`, got `{header}`"),
        });
    }
    let nr: usize = parse_field(head[0], "nr", &pstr, 1)?;
    let nt: usize = parse_field(head[1], "nt", &pstr, 1)?;
    let l: usize = parse_field(head[2], "L", &pstr, 1)?;
    let count: usize = parse_field(head[3], "count", &pstr, 1)?;
    if nr == 0 || nt == 0 || l == 0 {
        return Err(Error::Parse { path: pstr, line: 1, msg: "nr, nt, L must be positive".into() });
    }

    let mut taps = vec![vec![DMatrix::<Complex64>::zeros(nr, nt); l]; count];
    let mut seen = vec![false; count * l * nr * nt];
    for (idx, row) in lines {
        let line_no = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("expected 6 fields `realization,l,q,p,re,im`, got {}", fields.len()),
            });
        }
        let r: usize = parse_field(fields[0], "realization index", &pstr, line_no)?;
        let tap: usize = parse_field(fields[1], "tap index", &pstr, line_no)?;
        let q: usize = parse_field(fields[2], "receive index q", &pstr, line_no)?;
        let p: usize = parse_field(fields[3], "transmit index p", &pstr, line_no)?;
        let re: f64 = parse_field(fields[4], "re", &pstr, line_no)?;
        let im: f64 = parse_field(fields[5], "im", &pstr, line_no)?;
        if r >= count || tap >= l || q >= nr || p >= nt {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!(
                    "index out of range: realization {r} (< {count}), l {tap} (< {l}), \
                     q {q} (< {nr}), p {p} (< {nt})"
                ),
            });
        }
        let slot = ((r * l + tap) * nr + q) * nt + p;
        if seen[slot] {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("duplicate entry for realization {r}, l {tap}, q {q}, p {p}"),
            });
        }
        seen[slot] = true;
        taps[r][tap][(q, p)] = Complex64::new(re, im);
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let p = missing % nt;
        let q = (missing / nt) % nr;
        let tap = (missing / (nt * nr)) % l;
        let r = missing / (nt * nr * l);
        return Err(Error::Parse {
            path: pstr,
            line: text.lines().count(),
            msg: format!("missing entry for realization {r}, l {tap}, q {q}, p {p}"),
        });
    }
    taps.into_iter().map(ChannelRealization::new).collect()
}
