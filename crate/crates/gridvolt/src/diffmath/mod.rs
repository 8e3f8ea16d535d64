//! Reverse-mode automatic differentiation over real scalars.
//!
//! Values live on a [`Tape`] as nodes. Each node stores its value plus the
//! list of (parent, local partial) pairs that produced it; [`Tape::backward`]
//! walks nodes in reverse creation order and accumulates adjoints, so the
//! cost of a gradient is one pass over the recorded graph. Complex arithmetic
//! is layered on top in [`complex`] as pairs of real nodes.
//!
//! A tape is single-use: after `backward` it must be cleared (or dropped)
//! before recording again. A tape is confined to one thread; independent
//! tapes may run concurrently.

pub mod complex;

use thiserror::Error;

/// Errors raised by tape operations.
#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("division by zero on the tape")]
    DivisionByZero,
    #[error("invalid clamp bounds: lo {lo} > hi {hi}")]
    InvalidClampBounds { lo: f64, hi: f64 },
    #[error("non-differentiable point: {0}")]
    NonDifferentiable(&'static str),
    #[error("backward called on a consumed tape")]
    StaleTape,
}

/// Handle to one scalar node on a [`Tape`].
///
/// Handles are only meaningful on the tape that created them; mixing handles
/// across tapes is a logic error (indices would alias arbitrary nodes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DNode(u32);

impl DNode {
    /// Creation index of the node; ids are topologically ordered.
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Recording tape: a growable arena of scalar nodes.
pub struct Tape {
    vals: Vec<f64>,
    pstart: Vec<u32>,
    plen: Vec<u32>,
    parent_ids: Vec<u32>,
    parent_partials: Vec<f64>,
    consumed: bool,
    /// Minimum distance (over all piecewise ops recorded so far) between an
    /// op's argument and its nearest kink. Diagnostic only.
    kink_dist: f64,
    /// Order-sensitive hash of the branches taken by piecewise ops. Two
    /// evaluations of the same function with equal signatures lie on one
    /// smooth piece, so finite differences between them are trustworthy.
    branch_sig: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            pstart: Vec::new(),
            plen: Vec::new(),
            parent_ids: Vec::new(),
            parent_partials: Vec::new(),
            consumed: false,
            kink_dist: f64::INFINITY,
            branch_sig: 0,
        }
    }

    /// Drop all nodes but keep allocations; the tape counts as fresh again.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.pstart.clear();
        self.plen.clear();
        self.parent_ids.clear();
        self.parent_partials.clear();
        self.consumed = false;
        self.kink_dist = f64::INFINITY;
        self.branch_sig = 0;
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, n: DNode) -> f64 {
        self.vals[n.index()]
    }

    /// Smallest observed distance from a piecewise op's argument to its kink.
    pub fn kink_dist(&self) -> f64 {
        self.kink_dist
    }

    /// Hash of the branch decisions made so far; see the field docs.
    pub fn branch_sig(&self) -> u64 {
        self.branch_sig
    }

    pub(crate) fn note_kink(&mut self, dist: f64, branch: u64) {
        if dist < self.kink_dist {
            self.kink_dist = dist;
        }
        self.branch_sig = self.branch_sig.wrapping_mul(0x0000_0100_0000_01b3) ^ (branch + 1);
    }

    #[inline]
    fn push0(&mut self, val: f64) -> DNode {
        let id = self.vals.len() as u32;
        self.vals.push(val);
        self.pstart.push(self.parent_ids.len() as u32);
        self.plen.push(0);
        DNode(id)
    }

    #[inline]
    fn push1(&mut self, val: f64, p: DNode, d: f64) -> DNode {
        let id = self.vals.len() as u32;
        self.vals.push(val);
        self.pstart.push(self.parent_ids.len() as u32);
        self.plen.push(1);
        self.parent_ids.push(p.0);
        self.parent_partials.push(d);
        DNode(id)
    }

    #[inline]
    fn push2(&mut self, val: f64, p1: DNode, d1: f64, p2: DNode, d2: f64) -> DNode {
        let id = self.vals.len() as u32;
        self.vals.push(val);
        self.pstart.push(self.parent_ids.len() as u32);
        self.plen.push(2);
        self.parent_ids.push(p1.0);
        self.parent_ids.push(p2.0);
        self.parent_partials.push(d1);
        self.parent_partials.push(d2);
        DNode(id)
    }

    /// General fan-in node; used by fused complex ops and dot products.
    pub fn pushn(&mut self, val: f64, parents: &[(DNode, f64)]) -> DNode {
        let id = self.vals.len() as u32;
        self.vals.push(val);
        self.pstart.push(self.parent_ids.len() as u32);
        self.plen.push(parents.len() as u32);
        for &(p, d) in parents {
            self.parent_ids.push(p.0);
            self.parent_partials.push(d);
        }
        DNode(id)
    }

    /// Independent input the caller wants gradients for.
    pub fn leaf(&mut self, val: f64) -> DNode {
        self.push0(val)
    }

    /// Value that participates in arithmetic but whose gradient is unused.
    /// Identical to a leaf; the name documents intent at call sites.
    pub fn constant(&mut self, val: f64) -> DNode {
        self.push0(val)
    }

    pub fn leaves(&mut self, vals: &[f64]) -> Vec<DNode> {
        vals.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn add(&mut self, a: DNode, b: DNode) -> DNode {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push2(v, a, 1.0, b, 1.0)
    }

    pub fn sub(&mut self, a: DNode, b: DNode) -> DNode {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push2(v, a, 1.0, b, -1.0)
    }

    pub fn mul(&mut self, a: DNode, b: DNode) -> DNode {
        let va = self.vals[a.index()];
        let vb = self.vals[b.index()];
        self.push2(va * vb, a, vb, b, va)
    }

    pub fn div(&mut self, a: DNode, b: DNode) -> Result<DNode, DiffError> {
        let va = self.vals[a.index()];
        let vb = self.vals[b.index()];
        if vb == 0.0 {
            return Err(DiffError::DivisionByZero);
        }
        Ok(self.push2(va / vb, a, 1.0 / vb, b, -va / (vb * vb)))
    }

    pub fn neg(&mut self, a: DNode) -> DNode {
        let v = self.vals[a.index()];
        self.push1(-v, a, -1.0)
    }

    pub fn add_const(&mut self, a: DNode, c: f64) -> DNode {
        let v = self.vals[a.index()];
        self.push1(v + c, a, 1.0)
    }

    pub fn mul_const(&mut self, a: DNode, c: f64) -> DNode {
        let v = self.vals[a.index()];
        self.push1(v * c, a, c)
    }

    /// min(hi, max(lo, x)). Local partial is 1 strictly inside (lo, hi) and 0
    /// at or beyond either bound: saturated values receive no gradient push.
    pub fn clamp(&mut self, x: DNode, lo: f64, hi: f64) -> Result<DNode, DiffError> {
        if lo > hi {
            return Err(DiffError::InvalidClampBounds { lo, hi });
        }
        let v = self.vals[x.index()];
        let dist = (v - lo).abs().min((v - hi).abs());
        let (val, d, branch) = if v > lo && v < hi {
            (v, 1.0, 1)
        } else if v <= lo {
            (lo, 0.0, 0)
        } else {
            (hi, 0.0, 2)
        };
        self.note_kink(dist, branch);
        Ok(self.push1(val, x, d))
    }

    /// max(x, c) with subgradient 0 at and below the kink.
    pub fn max_const(&mut self, x: DNode, c: f64) -> DNode {
        let v = self.vals[x.index()];
        if v > c {
            self.note_kink(v - c, 1);
            self.push1(v, x, 1.0)
        } else {
            self.note_kink(c - v, 0);
            self.push1(c, x, 0.0)
        }
    }

    /// min(x, c) with subgradient 0 at and above the kink.
    pub fn min_const(&mut self, x: DNode, c: f64) -> DNode {
        let v = self.vals[x.index()];
        if v < c {
            self.note_kink(c - v, 1);
            self.push1(v, x, 1.0)
        } else {
            self.note_kink(v - c, 0);
            self.push1(c, x, 0.0)
        }
    }

    pub fn relu(&mut self, x: DNode) -> DNode {
        self.max_const(x, 0.0)
    }

    /// |x| with subgradient 0 at x = 0.
    pub fn abs(&mut self, x: DNode) -> DNode {
        let v = self.vals[x.index()];
        let (d, branch) = if v > 0.0 {
            (1.0, 2)
        } else if v < 0.0 {
            (-1.0, 0)
        } else {
            (0.0, 1)
        };
        self.note_kink(v.abs(), branch);
        self.push1(v.abs(), x, d)
    }

    pub fn tanh(&mut self, x: DNode) -> DNode {
        let v = self.vals[x.index()].tanh();
        self.push1(v, x, 1.0 - v * v)
    }

    pub fn sqrt(&mut self, x: DNode) -> Result<DNode, DiffError> {
        let v = self.vals[x.index()];
        if v <= 0.0 {
            return Err(DiffError::NonDifferentiable("sqrt at or below zero"));
        }
        let s = v.sqrt();
        Ok(self.push1(s, x, 0.5 / s))
    }

    /// Fused dot product Σ xᵢ·wᵢ recorded as a single fan-in node.
    pub fn dot(&mut self, xs: &[DNode], ws: &[DNode]) -> DNode {
        debug_assert_eq!(xs.len(), ws.len());
        let mut acc = 0.0;
        for (x, w) in xs.iter().zip(ws) {
            acc += self.vals[x.index()] * self.vals[w.index()];
        }
        let id = self.vals.len() as u32;
        self.vals.push(acc);
        self.pstart.push(self.parent_ids.len() as u32);
        self.plen.push(2 * xs.len() as u32);
        for (x, w) in xs.iter().zip(ws) {
            let vx = self.vals[x.index()];
            let vw = self.vals[w.index()];
            self.parent_ids.push(x.0);
            self.parent_partials.push(vw);
            self.parent_ids.push(w.0);
            self.parent_partials.push(vx);
        }
        DNode(id)
    }

    /// Σ xᵢ·wᵢ + b as a single node; the workhorse of dense layers.
    pub fn dot_affine(&mut self, xs: &[DNode], ws: &[DNode], b: DNode) -> DNode {
        debug_assert_eq!(xs.len(), ws.len());
        let mut acc = self.vals[b.index()];
        for (x, w) in xs.iter().zip(ws) {
            acc += self.vals[x.index()] * self.vals[w.index()];
        }
        let id = self.vals.len() as u32;
        self.vals.push(acc);
        self.pstart.push(self.parent_ids.len() as u32);
        self.plen.push(2 * xs.len() as u32 + 1);
        for (x, w) in xs.iter().zip(ws) {
            let vx = self.vals[x.index()];
            let vw = self.vals[w.index()];
            self.parent_ids.push(x.0);
            self.parent_partials.push(vw);
            self.parent_ids.push(w.0);
            self.parent_partials.push(vx);
        }
        self.parent_ids.push(b.0);
        self.parent_partials.push(1.0);
        DNode(id)
    }

    /// Reverse sweep from `root`. Consumes the tape (clear to reuse).
    pub fn backward(&mut self, root: DNode) -> Result<Gradients, DiffError> {
        if self.consumed {
            return Err(DiffError::StaleTape);
        }
        self.consumed = true;
        let mut adj = vec![0.0; self.vals.len()];
        adj[root.index()] = 1.0;
        for i in (0..=root.index()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let s = self.pstart[i] as usize;
            let e = s + self.plen[i] as usize;
            for k in s..e {
                adj[self.parent_ids[k] as usize] += a * self.parent_partials[k];
            }
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// d(root)/d(node). Nodes created after the root have adjoint 0.
    pub fn wrt(&self, n: DNode) -> f64 {
        self.adj[n.index()]
    }
}

pub fn d_add(t: &mut Tape, a: DNode, b: DNode) -> DNode {
    t.add(a, b)
}

pub fn d_sub(t: &mut Tape, a: DNode, b: DNode) -> DNode {
    t.sub(a, b)
}

pub fn d_mul(t: &mut Tape, a: DNode, b: DNode) -> DNode {
    t.mul(a, b)
}

pub fn d_div(t: &mut Tape, a: DNode, b: DNode) -> Result<DNode, DiffError> {
    t.div(a, b)
}

pub fn d_neg(t: &mut Tape, a: DNode) -> DNode {
    t.neg(a)
}

pub fn d_clamp(t: &mut Tape, x: DNode, lo: f64, hi: f64) -> Result<DNode, DiffError> {
    t.clamp(x, lo, hi)
}

/// Per-coordinate outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub analytic: f64,
    pub numeric: f64,
    /// |analytic − numeric| / max(1, |numeric|)
    pub rel_err: f64,
    /// True when the probe evaluations took different piecewise branches
    /// than the center point, i.e. the finite difference straddled a kink;
    /// the coordinate is excluded from `max_rel_err`.
    pub kink_flagged: bool,
    /// True when either side of the comparison was NaN or infinite.
    pub non_finite: bool,
}

/// Result of [`grad_check`]: analytic tape gradients versus central finite
/// differences of the same function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    /// Max rel_err over coordinates that are neither kink-flagged nor
    /// non-finite; 0 if none qualify.
    pub max_rel_err: f64,
    pub n_flagged: usize,
    pub n_non_finite: usize,
}

impl GradCheckReport {
    /// Coordinates that actually entered the pass/fail comparison.
    pub fn n_effective(&self) -> usize {
        self.coords.len() - self.n_flagged - self.n_non_finite
    }
}

/// Compare the tape gradient of `f` at `x` against central finite differences
/// with step `h`. `f` is rebuilt on a fresh tape for every evaluation, so it
/// must be a pure function of its inputs.
pub fn grad_check<F>(mut f: F, x: &[f64], h: f64) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Tape, &[DNode]) -> Result<DNode, DiffError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars = tape.leaves(x);
    let root = f(&mut tape, &vars)?;
    let center_sig = tape.branch_sig();
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut eval = |pt: &[f64], tape: &mut Tape| -> Result<(f64, u64), DiffError> {
        tape.clear();
        let vars = tape.leaves(pt);
        let root = f(tape, &vars)?;
        Ok((tape.value(root), tape.branch_sig()))
    };

    let mut coords = Vec::with_capacity(x.len());
    let mut max_rel_err = 0.0_f64;
    let mut n_flagged = 0;
    let mut n_non_finite = 0;
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        pt[i] = x[i] + h;
        let (fp, sp) = eval(&pt, &mut tape)?;
        pt[i] = x[i] - h;
        let (fm, sm) = eval(&pt, &mut tape)?;
        pt[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let kink_flagged = sp != center_sig || sm != center_sig;
        let non_finite = !numeric.is_finite() || !analytic[i].is_finite();
        let rel_err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if kink_flagged {
            n_flagged += 1;
        } else if non_finite {
            n_non_finite += 1;
        } else if rel_err > max_rel_err {
            max_rel_err = rel_err;
        }
        coords.push(CoordCheck {
            analytic: analytic[i],
            numeric,
            rel_err,
            kink_flagged,
            non_finite,
        });
    }
    Ok(GradCheckReport {
        coords,
        max_rel_err,
        n_flagged,
        n_non_finite,
    })
}
