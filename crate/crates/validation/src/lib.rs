//! Shared pieces of the acceptance run: verdict bookkeeping, data lookup and
//! a plain finite-difference gradient.

use std::fmt;
use std::path::PathBuf;

use raven_core::dataset::{split_paths, Split};
use raven_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

impl Verdict {
    pub fn of(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        })
    }
}

/// Collects one verdict per criterion and prints each as it arrives.
#[derive(Default)]
pub struct Ledger {
    rows: Vec<(usize, Verdict, String)>,
}

impl Ledger {
    pub fn record(&mut self, criterion: usize, verdict: Verdict, detail: impl Into<String>) {
        let detail = detail.into();
        println!("ACCEPTANCE {criterion} {verdict} {detail}");
        self.rows.push((criterion, verdict, detail));
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.1 == Verdict::Fail).count()
    }

    pub fn summary(&self) -> String {
        let count = |v| self.rows.iter().filter(|r| r.1 == v).count();
        format!(
            "{} pass, {} fail, {} skip",
            count(Verdict::Pass),
            count(Verdict::Fail),
            count(Verdict::Skip)
        )
    }
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// `RAVEN_DATA_DIR`, else `<workspace>/data/mnist`, provided both IDX
/// splits are present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("RAVEN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"));
    let present = [Split::Train, Split::Test].into_iter().all(|s| {
        let (images, labels) = split_paths(&dir, s);
        images.exists() && labels.exists()
    });
    present.then_some(dir)
}

/// Central differences of `f` with respect to every entry of `p`.
pub fn central_difference(p: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = p.clone();
    let mut out = Tensor::zeros(p.shape());
    for i in 0..p.numel() {
        let v = p.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe);
        probe.data_mut()[i] = v - h;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_cubic() {
        let p = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let g = central_difference(&p, 1e-5, |t| t.data().iter().map(|v| v * v * v).sum());
        for (gi, pi) in g.data().iter().zip(p.data()) {
            assert!((gi - 3.0 * pi * pi).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_is_symmetric_and_scale_free() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.1]);
        assert_eq!(relative_error(&a, &b), relative_error(&b, &a));
        let a10 = a.map(|v| 10.0 * v);
        let b10 = b.map(|v| 10.0 * v);
        assert!((relative_error(&a, &b) - relative_error(&a10, &b10)).abs() < 1e-15);
        assert_eq!(relative_error(&Tensor::zeros(&[2]), &Tensor::zeros(&[2])), 0.0);
    }
}
