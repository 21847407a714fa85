//! Linear time-invariant Gaussian state-space model.

use std::fmt;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::model::{Linearization, Matrix, ParamLayout, SystemModel, Vector};

/// One of the four LTI system matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtiMatrix {
    A,
    B,
    C,
    D,
}

/// A matrix entry exposed as a free parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LtiEntry {
    pub matrix: LtiMatrix,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for LtiEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}[{},{}]", self.matrix, self.row, self.col)
    }
}

impl FromStr for LtiEntry {
    type Err = Error;

    /// Parses `"A[0,1]"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse LTI entry {s:?}, expected e.g. \"A[0,1]\""));
        let s = s.trim();
        let matrix = match s.chars().next() {
            Some('A') => LtiMatrix::A,
            Some('B') => LtiMatrix::B,
            Some('C') => LtiMatrix::C,
            Some('D') => LtiMatrix::D,
            _ => return Err(bad()),
        };
        let inner = s[1..].strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
        let (r, c) = inner.split_once(',').ok_or_else(bad)?;
        Ok(Self {
            matrix,
            row: r.trim().parse().map_err(|_| bad())?,
            col: c.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// `x' = A x + B u`, `y = C x + D u`, with a chosen subset of entries free.
///
/// θ holds the free entries in the order given by `free`; the stored
/// matrices provide the values of every other entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    d: Matrix,
    free: Vec<LtiEntry>,
}

impl LtiModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, d: Matrix, free: Vec<LtiEntry>) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("C columns", n, c.ncols())?;
        check_dim("D rows", c.nrows(), d.nrows())?;
        check_dim("D columns", b.ncols(), d.ncols())?;
        let model = Self { a, b, c, d, free };
        for e in &model.free {
            let m = model.matrix(e.matrix);
            if e.row >= m.nrows() || e.col >= m.ncols() {
                return Err(Error::Config(format!("free entry {e} is out of range")));
            }
        }
        Ok(model)
    }

    /// Autonomous model with every entry of `A` free.
    pub fn autonomous(a: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        let m = c.nrows();
        let free = (0..n)
            .flat_map(|row| (0..n).map(move |col| LtiEntry { matrix: LtiMatrix::A, row, col }))
            .collect();
        Self::new(a, Matrix::zeros(n, 0), c, Matrix::zeros(m, 0), free)
    }

    pub fn with_free(mut self, free: Vec<LtiEntry>) -> Result<Self> {
        self.free = free;
        Self::new(self.a, self.b, self.c, self.d, self.free)
    }

    pub fn free(&self) -> &[LtiEntry] {
        &self.free
    }

    fn matrix(&self, which: LtiMatrix) -> &Matrix {
        match which {
            LtiMatrix::A => &self.a,
            LtiMatrix::B => &self.b,
            LtiMatrix::C => &self.c,
            LtiMatrix::D => &self.d,
        }
    }

    /// θ read from the stored matrices.
    pub fn theta(&self) -> Vector {
        Vector::from_iterator(self.free.len(), self.free.iter().map(|e| self.matrix(e.matrix)[(e.row, e.col)]))
    }

    /// The four system matrices with θ substituted.
    pub fn matrices(&self, theta: &Vector) -> (Matrix, Matrix, Matrix, Matrix) {
        let (mut a, mut b, mut c, mut d) = (self.a.clone(), self.b.clone(), self.c.clone(), self.d.clone());
        for (e, v) in self.free.iter().zip(theta.iter()) {
            let m = match e.matrix {
                LtiMatrix::A => &mut a,
                LtiMatrix::B => &mut b,
                LtiMatrix::C => &mut c,
                LtiMatrix::D => &mut d,
            };
            m[(e.row, e.col)] = *v;
        }
        (a, b, c, d)
    }

    fn substituted(&self, theta: &Vector, which: LtiMatrix) -> Matrix {
        let mut m = self.matrix(which).clone();
        for (e, v) in self.free.iter().zip(theta.iter()) {
            if e.matrix == which {
                m[(e.row, e.col)] = *v;
            }
        }
        m
    }

    /// Derivatives of `M(θ) v` with respect to θ for the two matrices `M, N`
    /// entering one map (`A, B` for dynamics, `C, D` for observation).
    fn param_jacobian(&self, rows: usize, x: &Vector, u: &Vector, state: LtiMatrix, input: LtiMatrix) -> Matrix {
        let mut j = Matrix::zeros(rows, self.free.len());
        for (k, e) in self.free.iter().enumerate() {
            if e.matrix == state {
                j[(e.row, k)] = x[e.col];
            } else if e.matrix == input {
                j[(e.row, k)] = u[e.col];
            }
        }
        j
    }
}

impl SystemModel for LtiModel {
    fn id(&self) -> &str {
        "lti"
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn param_layout(&self) -> ParamLayout {
        ParamLayout::from_lengths(self.free.iter().map(|e| (e.to_string(), 1)))
    }

    fn step(&self, theta: &Vector, x: &Vector, u: &Vector, _t: usize) -> Vector {
        self.substituted(theta, LtiMatrix::A) * x + self.substituted(theta, LtiMatrix::B) * u
    }

    fn observe(&self, theta: &Vector, x: &Vector, u: &Vector, _t: usize) -> Vector {
        self.substituted(theta, LtiMatrix::C) * x + self.substituted(theta, LtiMatrix::D) * u
    }

    fn dynamics_jacobians(&self, theta: &Vector, x: &Vector, u: &Vector, _t: usize) -> Linearization {
        Linearization {
            wrt_state: self.substituted(theta, LtiMatrix::A),
            wrt_params: self.param_jacobian(self.state_dim(), x, u, LtiMatrix::A, LtiMatrix::B),
            approximate: false,
        }
    }

    fn observation_jacobians(&self, theta: &Vector, x: &Vector, u: &Vector, _t: usize) -> Linearization {
        Linearization {
            wrt_state: self.substituted(theta, LtiMatrix::C),
            wrt_params: self.param_jacobian(self.obs_dim(), x, u, LtiMatrix::C, LtiMatrix::D),
            approximate: false,
        }
    }

    fn linear_observation(&self, theta: &Vector, u: &Vector, _t: usize) -> Option<(Matrix, Vector)> {
        Some((
            self.substituted(theta, LtiMatrix::C),
            self.substituted(theta, LtiMatrix::D) * u,
        ))
    }
}
