//! The reverse-mode tape underneath everything else: build a small scalar
//! expression, pull gradients back through it, and confirm them against
//! central finite differences.

use vihmc::tape::{Matrix, Tape};

/// f(a, b) = sum((sin(a) * b)^2)
fn eval(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let na = tape.leaf(Matrix::column(a));
    let nb = tape.leaf(Matrix::column(b));
    let s = tape.sin(na);
    let p = tape.mul(s, nb);
    let sq = tape.square(p);
    let out = tape.sum(sq);
    let grads = tape.grad_scalar(out).unwrap();
    (tape.value(out).data[0], grads.of(na).to_vec(), grads.of(nb).to_vec())
}

fn main() {
    let a = [0.3, -1.2, 2.0];
    let b = [1.5, 0.4, -0.7];
    let (value, grad_a, grad_b) = eval(&a, &b);
    println!("f = {value:.6}");

    let h = 1e-6;
    for i in 0..a.len() {
        let mut ap = a;
        let mut am = a;
        ap[i] += h;
        am[i] -= h;
        let fd = (eval(&ap, &b).0 - eval(&am, &b).0) / (2.0 * h);
        println!("df/da[{i}]: tape {:+.6}, finite difference {:+.6}", grad_a[i], fd);
        assert!((grad_a[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
    }
    for i in 0..b.len() {
        let mut bp = b;
        let mut bm = b;
        bp[i] += h;
        bm[i] -= h;
        let fd = (eval(&a, &bp).0 - eval(&a, &bm).0) / (2.0 * h);
        println!("df/db[{i}]: tape {:+.6}, finite difference {:+.6}", grad_b[i], fd);
        assert!((grad_b[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
    }
    println!("all gradients match");
}
