//! Dense row-major `f64` matrices with a GEMM-backed multiply.

/// A dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    /// Column vector (n, 1) from a slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    /// Row vector (1, n) from a slice.
    pub fn row(values: &[f64]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Elementwise map into a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which operands of a product are transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    NN,
    TN,
    NT,
}

#[cfg(feature = "system-blas")]
mod blas {
    //! Lazy binding to the system BLAS.
    //!
    //! The library is dlopen'd on first use so two things can happen
    //! beforehand: dynamic-arch OpenBLAS builds that predate this CPU get
    //! steered onto their AVX-512 kernels via OPENBLAS_CORETYPE, and the
    //! library's own threading is pinned to one thread (parallelism lives
    //! above the kernels, so runs replay bit for bit). When no usable
    //! library is found the caller falls back to the pure-Rust kernels.
    use std::ffi::{c_char, c_int, c_void};
    use std::sync::OnceLock;

    pub const ROW_MAJOR: c_int = 101;
    pub const NO_TRANS: c_int = 111;
    pub const TRANS: c_int = 112;

    pub type DgemmFn = unsafe extern "C" fn(
        c_int,
        c_int,
        c_int,
        c_int,
        c_int,
        c_int,
        f64,
        *const f64,
        c_int,
        *const f64,
        c_int,
        f64,
        *mut f64,
        c_int,
    );
    type SetThreadsFn = unsafe extern "C" fn(c_int);

    extern "C" {
        fn dlopen(filename: *const c_char, flag: c_int) -> *mut c_void;
        fn dlsym(handle: *mut c_void, symbol: *const c_char) -> *mut c_void;
    }
    const RTLD_NOW: c_int = 2;

    pub struct Lib {
        pub dgemm: DgemmFn,
    }

    static LIB: OnceLock<Option<Lib>> = OnceLock::new();

    pub fn lib() -> Option<&'static Lib> {
        LIB.get_or_init(|| unsafe { load() }).as_ref()
    }

    #[cfg(target_arch = "x86_64")]
    fn steer_core_type() {
        if std::env::var_os("OPENBLAS_CORETYPE").is_none()
            && std::arch::is_x86_feature_detected!("avx512f")
        {
            std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
        }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn steer_core_type() {}

    unsafe fn load() -> Option<Lib> {
        steer_core_type();
        let mut handle = std::ptr::null_mut();
        for name in [c"libopenblas.so.0", c"libopenblas.so", c"libblas.so.3"] {
            handle = dlopen(name.as_ptr(), RTLD_NOW);
            if !handle.is_null() {
                break;
            }
        }
        if handle.is_null() {
            return None;
        }
        let dgemm = dlsym(handle, c"cblas_dgemm".as_ptr());
        if dgemm.is_null() {
            return None;
        }
        let set_threads = dlsym(handle, c"openblas_set_num_threads".as_ptr());
        if !set_threads.is_null() {
            std::mem::transmute::<*mut c_void, SetThreadsFn>(set_threads)(1);
        }
        Some(Lib {
            dgemm: std::mem::transmute::<*mut c_void, DgemmFn>(dgemm),
        })
    }
}

/// `c += a? * b?` where `?` marks the transposes selected by `trans`.
///
/// Shapes are checked against the logical (post-transpose) dimensions.
pub fn gemm_acc(c: &mut Matrix, a: &Matrix, b: &Matrix, trans: Trans) {
    let (m, k) = match trans {
        Trans::NN | Trans::NT => (a.rows, a.cols),
        Trans::TN => (a.cols, a.rows),
    };
    let (k2, n) = match trans {
        Trans::NN | Trans::TN => (b.rows, b.cols),
        Trans::NT => (b.cols, b.rows),
    };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");

    #[cfg(feature = "system-blas")]
    if let Some(lib) = blas::lib() {
        let (ta, tb) = match trans {
            Trans::NN => (blas::NO_TRANS, blas::NO_TRANS),
            Trans::TN => (blas::TRANS, blas::NO_TRANS),
            Trans::NT => (blas::NO_TRANS, blas::TRANS),
        };
        unsafe {
            (lib.dgemm)(
                blas::ROW_MAJOR,
                ta,
                tb,
                m as std::ffi::c_int,
                n as std::ffi::c_int,
                k as std::ffi::c_int,
                1.0,
                a.data.as_ptr(),
                a.cols as std::ffi::c_int,
                b.data.as_ptr(),
                b.cols as std::ffi::c_int,
                1.0,
                c.data.as_mut_ptr(),
                c.cols as std::ffi::c_int,
            );
        }
        return;
    }

    // Row-major strides; a transpose swaps the (row, col) strides.
    let (rsa, csa) = match trans {
        Trans::NN | Trans::NT => (a.cols as isize, 1),
        Trans::TN => (1, a.cols as isize),
    };
    let (rsb, csb) = match trans {
        Trans::NN | Trans::TN => (b.cols as isize, 1),
        Trans::NT => (1, b.cols as isize),
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `a * b` into a fresh matrix.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_acc(&mut c, a, b, Trans::NN);
    c
}
