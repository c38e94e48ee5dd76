//! Thin wrappers over the system LAPACK (OpenBLAS) for the dense symmetric
//! eigensolves and Cholesky factorizations used throughout the crate.
//!
//! BLAS/LAPACK threading is pinned to one thread so that results are
//! bitwise reproducible regardless of the caller's thread count; outer-level
//! parallelism is handled with rayon over independent work items.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

mod ffi {
    use std::os::raw::{c_char, c_int};

    extern "C" {
        pub fn openblas_set_num_threads(num_threads: c_int);

        pub fn dsyevd_(
            jobz: *const c_char,
            uplo: *const c_char,
            n: *const c_int,
            a: *mut f64,
            lda: *const c_int,
            w: *mut f64,
            work: *mut f64,
            lwork: *const c_int,
            iwork: *mut c_int,
            liwork: *const c_int,
            info: *mut c_int,
        );

        pub fn dsyev_2stage_(
            jobz: *const c_char,
            uplo: *const c_char,
            n: *const c_int,
            a: *mut f64,
            lda: *const c_int,
            w: *mut f64,
            work: *mut f64,
            lwork: *const c_int,
            info: *mut c_int,
        );

        pub fn dsyevx_(
            jobz: *const c_char,
            range: *const c_char,
            uplo: *const c_char,
            n: *const c_int,
            a: *mut f64,
            lda: *const c_int,
            vl: *const f64,
            vu: *const f64,
            il: *const c_int,
            iu: *const c_int,
            abstol: *const f64,
            m: *mut c_int,
            w: *mut f64,
            z: *mut f64,
            ldz: *const c_int,
            work: *mut f64,
            lwork: *const c_int,
            iwork: *mut c_int,
            ifail: *mut c_int,
            info: *mut c_int,
        );

        pub fn dpotrf_(
            uplo: *const c_char,
            n: *const c_int,
            a: *mut f64,
            lda: *const c_int,
            info: *mut c_int,
        );

        pub fn dpotrs_(
            uplo: *const c_char,
            n: *const c_int,
            nrhs: *const c_int,
            a: *const f64,
            lda: *const c_int,
            b: *mut f64,
            ldb: *const c_int,
            info: *mut c_int,
        );

        pub fn dpbtrf_(
            uplo: *const c_char,
            n: *const c_int,
            kd: *const c_int,
            ab: *mut f64,
            ldab: *const c_int,
            info: *mut c_int,
        );

        pub fn dpbtrs_(
            uplo: *const c_char,
            n: *const c_int,
            kd: *const c_int,
            nrhs: *const c_int,
            ab: *const f64,
            ldab: *const c_int,
            b: *mut f64,
            ldb: *const c_int,
            info: *mut c_int,
        );
    }
}

fn pin_blas_threads() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe { ffi::openblas_set_num_threads(1) });
}

/// Copies a square symmetric ndarray into a column-major buffer.
///
/// The matrix is symmetrized on the way in so that tiny asymmetries from
/// accumulated roundoff cannot leak into the factorizations.
fn to_col_major_symmetrized(a: &Array2<f64>) -> (Vec<f64>, usize) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut buf = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            buf[i + j * n] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    (buf, n)
}

/// Full symmetric eigendecomposition; eigenvalues descending, eigenvectors
/// as columns of the returned matrix (column k pairs with eigenvalue k).
pub fn sym_eigen_desc(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    pin_blas_threads();
    let (mut buf, n) = to_col_major_symmetrized(a);
    let mut w = vec![0.0; n];
    let ni = n as i32;
    let mut info = 0i32;

    // Workspace query, then the actual call.
    let (mut lwork, mut liwork) = (-1i32, -1i32);
    let (mut wq, mut iwq) = (vec![0.0f64], vec![0i32]);
    unsafe {
        ffi::dsyevd_(
            &(b'V' as i8),
            &(b'L' as i8),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            wq.as_mut_ptr(),
            &lwork,
            iwq.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyevd(query)", info });
    }
    lwork = wq[0] as i32;
    liwork = iwq[0];
    let mut work = vec![0.0; lwork as usize];
    let mut iwork = vec![0i32; liwork as usize];
    unsafe {
        ffi::dsyevd_(
            &(b'V' as i8),
            &(b'L' as i8),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyevd", info });
    }

    // LAPACK returns ascending order; flip to descending.
    let values = Array1::from_iter(w.iter().rev().copied());
    let mut vectors = Array2::zeros((n, n));
    for k in 0..n {
        let src = n - 1 - k;
        for i in 0..n {
            vectors[(i, k)] = buf[i + src * n];
        }
    }
    Ok((values, vectors))
}

/// Eigenvalues only (descending), via the two-stage reduction.
pub fn sym_eigenvalues_desc(a: &Array2<f64>) -> Result<Array1<f64>> {
    pin_blas_threads();
    let (mut buf, n) = to_col_major_symmetrized(a);
    let mut w = vec![0.0; n];
    let ni = n as i32;
    let mut info = 0i32;

    let lwork_query = -1i32;
    let mut wq = vec![0.0f64];
    unsafe {
        ffi::dsyev_2stage_(
            &(b'N' as i8),
            &(b'L' as i8),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            wq.as_mut_ptr(),
            &lwork_query,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyev_2stage(query)", info });
    }
    let lwork = wq[0] as i32;
    let mut work = vec![0.0; lwork as usize];
    unsafe {
        ffi::dsyev_2stage_(
            &(b'N' as i8),
            &(b'L' as i8),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyev_2stage", info });
    }
    Ok(Array1::from_iter(w.iter().rev().copied()))
}

/// Leading `k` eigenpairs (descending). Falls back to the full solver when
/// `k` is a large fraction of `n`, where inverse iteration loses its edge.
pub fn sym_eigen_top_k(a: &Array2<f64>, k: usize) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    let k = k.min(n);
    if k == 0 {
        return Err(Error::InvalidArgument("requested zero eigenpairs".into()));
    }
    if 4 * k >= 3 * n {
        let (vals, vecs) = sym_eigen_desc(a)?;
        let vals_k = vals.slice(ndarray::s![..k]).to_owned();
        let vecs_k = vecs.slice(ndarray::s![.., ..k]).to_owned();
        return Ok((vals_k, vecs_k));
    }

    pin_blas_threads();
    let (mut buf, _) = to_col_major_symmetrized(a);
    let ni = n as i32;
    let il = (n - k + 1) as i32;
    let iu = n as i32;
    let abstol = 2.0 * f64::MIN_POSITIVE;
    let mut m = 0i32;
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n * k];
    let mut iwork = vec![0i32; 5 * n];
    let mut ifail = vec![0i32; n];
    let mut info = 0i32;
    let (vl, vu) = (0.0f64, 0.0f64);

    let lwork_query = -1i32;
    let mut wq = vec![0.0f64];
    unsafe {
        ffi::dsyevx_(
            &(b'V' as i8),
            &(b'I' as i8),
            &(b'L' as i8),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &ni,
            wq.as_mut_ptr(),
            &lwork_query,
            iwork.as_mut_ptr(),
            ifail.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyevx(query)", info });
    }
    let lwork = wq[0] as i32;
    let mut work = vec![0.0; lwork as usize];
    unsafe {
        ffi::dsyevx_(
            &(b'V' as i8),
            &(b'I' as i8),
            &(b'L' as i8),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &ni,
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            ifail.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyevx", info });
    }
    let m = m as usize;
    if m < k {
        return Err(Error::Lapack { routine: "dsyevx(m<k)", info: m as i32 });
    }

    // dsyevx returns the selected eigenvalues ascending; flip to descending.
    let values = Array1::from_iter((0..k).map(|j| w[k - 1 - j]));
    let mut vectors = Array2::zeros((n, k));
    for j in 0..k {
        let src = k - 1 - j;
        for i in 0..n {
            vectors[(i, j)] = z[i + src * n];
        }
    }
    Ok((values, vectors))
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub struct Cholesky {
    l: Vec<f64>, // column-major, lower triangle holds L
    n: usize,
}

impl Cholesky {
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        pin_blas_threads();
        let (mut buf, n) = to_col_major_symmetrized(a);
        let ni = n as i32;
        let mut info = 0i32;
        unsafe {
            ffi::dpotrf_(&(b'L' as i8), &ni, buf.as_mut_ptr(), &ni, &mut info);
        }
        if info != 0 {
            return Err(Error::Lapack { routine: "dpotrf", info });
        }
        Ok(Self { l: buf, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// log(det A) from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.l[i + i * self.n].ln()).sum()
    }

    pub fn solve_vec(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        assert_eq!(b.len(), self.n);
        let mut buf: Vec<f64> = b.to_vec();
        self.solve_in_place(&mut buf, 1)?;
        Ok(Array1::from_vec(buf))
    }

    /// `L z` with the lower-triangular factor (e.g. to draw correlated
    /// Gaussian samples).
    pub fn lower_triangle_matvec(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n);
        let n = self.n;
        let mut y = vec![0.0; n];
        for j in 0..n {
            let zj = z[j];
            for i in j..n {
                y[i] += self.l[i + j * n] * zj;
            }
        }
        y
    }

    /// Solves A X = B for a full right-hand-side matrix (n x m).
    pub fn solve_mat(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        let (n, m) = (b.nrows(), b.ncols());
        assert_eq!(n, self.n);
        // dpotrs expects column-major storage.
        let mut buf = vec![0.0; n * m];
        for j in 0..m {
            for i in 0..n {
                buf[i + j * n] = b[(i, j)];
            }
        }
        self.solve_in_place(&mut buf, m)?;
        let mut out = Array2::zeros((n, m));
        for j in 0..m {
            for i in 0..n {
                out[(i, j)] = buf[i + j * n];
            }
        }
        Ok(out)
    }

    fn solve_in_place(&self, b: &mut [f64], nrhs: usize) -> Result<()> {
        let ni = self.n as i32;
        let nrhs_i = nrhs as i32;
        let mut info = 0i32;
        unsafe {
            ffi::dpotrs_(
                &(b'L' as i8),
                &ni,
                &nrhs_i,
                self.l.as_ptr(),
                &ni,
                b.as_mut_ptr(),
                &ni,
                &mut info,
            );
        }
        if info != 0 {
            return Err(Error::Lapack { routine: "dpotrs", info });
        }
        Ok(())
    }
}

/// Cholesky with the escalating-jitter policy: on factorization failure a
/// diagonal shift of `1e-10 * scale` is added, escalating tenfold up to
/// `1e-6 * scale` before giving up.
pub fn cholesky_with_jitter(a: &Array2<f64>, scale: f64) -> Result<(Cholesky, f64)> {
    if let Ok(chol) = Cholesky::new(a) {
        return Ok((chol, 0.0));
    }
    let mut jitter = 1e-10 * scale;
    let max_jitter = 1e-6 * scale;
    while jitter <= max_jitter * (1.0 + 1e-14) {
        let mut shifted = a.clone();
        for i in 0..a.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Ok(chol) = Cholesky::new(&shifted) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::IllConditioned { max_jitter })
}

/// Cholesky factorization of a symmetric positive-definite band matrix
/// (lower band storage, LAPACK `dpbtrf` layout).
pub struct BandCholesky {
    ab: Vec<f64>, // (kd+1) x n column-major band
    n: usize,
    kd: usize,
}

impl BandCholesky {
    /// `band[(r, j)]` must hold A(j + r, j) for r in 0..=kd (zero-padded past
    /// the matrix edge), i.e. row 0 is the diagonal.
    pub fn new(mut ab: Vec<f64>, n: usize, kd: usize) -> Result<Self> {
        pin_blas_threads();
        assert_eq!(ab.len(), (kd + 1) * n);
        let ni = n as i32;
        let kdi = kd as i32;
        let ldab = (kd + 1) as i32;
        let mut info = 0i32;
        unsafe {
            ffi::dpbtrf_(&(b'L' as i8), &ni, &kdi, ab.as_mut_ptr(), &ldab, &mut info);
        }
        if info != 0 {
            return Err(Error::Lapack { routine: "dpbtrf", info });
        }
        Ok(Self { ab, n, kd })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(b.len(), self.n);
        let mut x = b.to_vec();
        let ni = self.n as i32;
        let kdi = self.kd as i32;
        let ldab = (self.kd + 1) as i32;
        let nrhs = 1i32;
        let mut info = 0i32;
        unsafe {
            ffi::dpbtrs_(
                &(b'L' as i8),
                &ni,
                &kdi,
                &nrhs,
                self.ab.as_ptr(),
                &ldab,
                x.as_mut_ptr(),
                &ni,
                &mut info,
            );
        }
        if info != 0 {
            return Err(Error::Lapack { routine: "dpbtrs", info });
        }
        Ok(x)
    }
}
