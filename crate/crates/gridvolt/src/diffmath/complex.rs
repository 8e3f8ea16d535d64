//! Complex arithmetic on the tape as pairs of real nodes.
//!
//! No Wirtinger calculus: every quantity that reaches a loss here is real
//! (voltage magnitudes), so real-pair adjoints are sufficient. Ops are fused
//! into single fan-in nodes where that saves tape space, which matters in
//! unrolled power-flow sweeps.

use num_complex::Complex64;

use super::{DiffError, DNode, Tape};

/// A complex value as two real tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct DComplex {
    pub re: DNode,
    pub im: DNode,
}

pub fn c_new(re: DNode, im: DNode) -> DComplex {
    DComplex { re, im }
}

pub fn c_const(t: &mut Tape, z: Complex64) -> DComplex {
    DComplex {
        re: t.constant(z.re),
        im: t.constant(z.im),
    }
}

pub fn c_value(t: &Tape, z: DComplex) -> Complex64 {
    Complex64::new(t.value(z.re), t.value(z.im))
}

pub fn c_add(t: &mut Tape, a: DComplex, b: DComplex) -> DComplex {
    DComplex {
        re: t.add(a.re, b.re),
        im: t.add(a.im, b.im),
    }
}

pub fn c_sub(t: &mut Tape, a: DComplex, b: DComplex) -> DComplex {
    DComplex {
        re: t.sub(a.re, b.re),
        im: t.sub(a.im, b.im),
    }
}

pub fn c_neg(t: &mut Tape, a: DComplex) -> DComplex {
    DComplex {
        re: t.neg(a.re),
        im: t.neg(a.im),
    }
}

pub fn c_conj(t: &mut Tape, a: DComplex) -> DComplex {
    DComplex {
        re: t.add_const(a.re, 0.0),
        im: t.neg(a.im),
    }
}

pub fn c_mul(t: &mut Tape, a: DComplex, b: DComplex) -> DComplex {
    let (ar, ai) = (t.value(a.re), t.value(a.im));
    let (br, bi) = (t.value(b.re), t.value(b.im));
    let re = t.pushn(
        ar * br - ai * bi,
        &[(a.re, br), (b.re, ar), (a.im, -bi), (b.im, -ai)],
    );
    let im = t.pushn(
        ar * bi + ai * br,
        &[(a.re, bi), (b.im, ar), (a.im, br), (b.re, ai)],
    );
    DComplex { re, im }
}

/// Multiply by a plain complex coefficient without materializing it on the tape.
pub fn c_mul_const(t: &mut Tape, a: DComplex, c: Complex64) -> DComplex {
    let (ar, ai) = (t.value(a.re), t.value(a.im));
    let re = t.push2(ar * c.re - ai * c.im, a.re, c.re, a.im, -c.im);
    let im = t.push2(ar * c.im + ai * c.re, a.re, c.im, a.im, c.re);
    DComplex { re, im }
}

pub fn c_add_const(t: &mut Tape, a: DComplex, c: Complex64) -> DComplex {
    DComplex {
        re: t.add_const(a.re, c.re),
        im: t.add_const(a.im, c.im),
    }
}

pub fn c_div(t: &mut Tape, a: DComplex, b: DComplex) -> Result<DComplex, DiffError> {
    let den = t.dot(&[b.re, b.im], &[b.re, b.im]);
    if t.value(den) == 0.0 {
        return Err(DiffError::DivisionByZero);
    }
    let (ar, ai) = (t.value(a.re), t.value(a.im));
    let (br, bi) = (t.value(b.re), t.value(b.im));
    let num_re = t.pushn(
        ar * br + ai * bi,
        &[(a.re, br), (b.re, ar), (a.im, bi), (b.im, ai)],
    );
    let num_im = t.pushn(
        ai * br - ar * bi,
        &[(a.im, br), (b.re, ai), (a.re, -bi), (b.im, -ar)],
    );
    Ok(DComplex {
        re: t.div(num_re, den)?,
        im: t.div(num_im, den)?,
    })
}

/// Squared modulus re² + im² as one fused node.
pub fn c_abs_sq(t: &mut Tape, z: DComplex) -> DNode {
    t.dot(&[z.re, z.im], &[z.re, z.im])
}

/// Modulus sqrt(re² + im²); partials re/|z| and im/|z| via the chain rule.
pub fn c_abs(t: &mut Tape, z: DComplex) -> Result<DNode, DiffError> {
    let sq = c_abs_sq(t, z);
    if t.value(sq) == 0.0 {
        return Err(DiffError::NonDifferentiable("c_abs at zero"));
    }
    t.sqrt(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_of_3_4i() {
        let mut t = Tape::new();
        let z = c_new(t.leaf(3.0), t.leaf(4.0));
        let m = c_abs(&mut t, z).unwrap();
        assert_eq!(t.value(m), 5.0);
        let g = t.backward(m).unwrap();
        assert!((g.wrt(z.re) - 0.6).abs() < 1e-15);
        assert!((g.wrt(z.im) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn abs_at_zero_is_an_error() {
        let mut t = Tape::new();
        let z = c_new(t.leaf(0.0), t.leaf(0.0));
        assert_eq!(
            c_abs(&mut t, z).unwrap_err(),
            DiffError::NonDifferentiable("c_abs at zero")
        );
    }

    #[test]
    fn conj_of_real_is_identity() {
        let mut t = Tape::new();
        let z = c_new(t.leaf(1.0), t.leaf(0.0));
        let c = c_conj(&mut t, z);
        assert_eq!(c_value(&t, c), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn mul_conjugate_pair() {
        let mut t = Tape::new();
        let a = c_new(t.leaf(1.0), t.leaf(1.0));
        let b = c_new(t.leaf(1.0), t.leaf(-1.0));
        let p = c_mul(&mut t, a, b);
        assert_eq!(c_value(&t, p), Complex64::new(2.0, 0.0));
    }

    #[test]
    fn modulus_identity_under_product() {
        // (a·b)·conj(a·b) = |a|²·|b|² within 1e-12 relative.
        let mut t = Tape::new();
        let a = c_new(t.leaf(1.3), t.leaf(-0.7));
        let b = c_new(t.leaf(-2.1), t.leaf(0.4));
        let ab = c_mul(&mut t, a, b);
        let lhs = c_abs_sq(&mut t, ab);
        let asq = c_abs_sq(&mut t, a);
        let bsq = c_abs_sq(&mut t, b);
        let rhs = t.mul(asq, bsq);
        let (l, r) = (t.value(lhs), t.value(rhs));
        assert!((l - r).abs() <= 1e-12 * r.abs());
    }

    #[test]
    fn div_matches_plain_complex() {
        let mut t = Tape::new();
        let a = c_new(t.leaf(2.5), t.leaf(-1.5));
        let b = c_new(t.leaf(0.3), t.leaf(0.9));
        let q = c_div(&mut t, a, b).unwrap();
        let want = Complex64::new(2.5, -1.5) / Complex64::new(0.3, 0.9);
        let got = c_value(&t, q);
        assert!((got - want).norm() < 1e-14);
    }

    #[test]
    fn div_gradients_match_finite_differences() {
        let f = |t: &mut Tape, xs: &[DNode]| -> Result<DNode, DiffError> {
            let a = c_new(xs[0], xs[1]);
            let b = c_new(xs[2], xs[3]);
            let q = c_div(t, a, b)?;
            c_abs(t, q)
        };
        let report = super::super::grad_check(f, &[2.5, -1.5, 0.3, 0.9], 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
        assert_eq!(report.n_flagged, 0);
    }
}
