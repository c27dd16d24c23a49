//! Spectrogram preprocessing: fixed 3x3 residual filters and the
//! neighbourhood regression used to derive data-driven ones.
//!
//! Kernels are indexed `[row][col]` with row 0 at the lower frequency bin
//! and col 0 at the earlier frame; filtering is cross-correlation with one
//! pixel of zero padding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor4;
use crate::spectrogram::SpectrogramMatrix;

pub const FILTERS: usize = 4;
const ZERO_SUM_TOLERANCE: f64 = 1e-9;

pub type Kernel = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    kernels: [Kernel; FILTERS],
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::fixed()
    }
}

/// Neighbour offsets `(dr, dc)` in regression order, row-major around the
/// centre.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

impl FilterBank {
    /// First and second differences along frequency and time:
    /// K1 `x[r+1,c] - x[r,c]`, K2 `x[r,c-1] - x[r,c]`,
    /// K3 `x[r-1,c] - 2x[r,c] + x[r+1,c]`, K4 the same along time.
    pub fn fixed() -> Self {
        let k1 = [[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 1.0, 0.0]];
        let k2 = [[0.0, 0.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 0.0]];
        let k3 = [[0.0, 1.0, 0.0], [0.0, -2.0, 0.0], [0.0, 1.0, 0.0]];
        let k4 = [[0.0, 0.0, 0.0], [1.0, -2.0, 1.0], [0.0, 0.0, 0.0]];
        Self {
            kernels: [k1, k2, k3, k4],
        }
    }

    /// Accepts only zero-sum kernels.
    pub fn new(kernels: [Kernel; FILTERS]) -> Result<Self> {
        for (i, k) in kernels.iter().enumerate() {
            let sum: f64 = k.iter().flatten().sum();
            if k.iter().flatten().any(|v| !v.is_finite()) || sum.abs() > ZERO_SUM_TOLERANCE {
                return Err(Error::input(format!(
                    "kernel {} sums to {sum}, residual filters must sum to zero",
                    i + 1
                )));
            }
        }
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &[Kernel; FILTERS] {
        &self.kernels
    }

    /// Text form: four blocks of three rows of three numbers, blocks
    /// separated by blank lines. Lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let numbers = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.starts_with('#'))
            .flat_map(str::split_whitespace)
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::format(format!("bad filter coefficient {tok:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if numbers.len() != FILTERS * 9 {
            return Err(Error::format(format!(
                "filter bank needs {} coefficients, found {}",
                FILTERS * 9,
                numbers.len()
            )));
        }
        let mut kernels = [[[0.0; 3]; 3]; FILTERS];
        for (i, v) in numbers.into_iter().enumerate() {
            kernels[i / 9][(i % 9) / 3][i % 3] = v;
        }
        Self::new(kernels)
    }

    pub fn to_text(&self) -> String {
        self.kernels
            .iter()
            .map(|k| {
                k.iter()
                    .map(|row| {
                        row.iter()
                            .map(|v| format!("{v:?}"))
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .collect::<Vec<_>>()
            .join("\n\n")
            + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Cross-correlates one kernel over a row-major grid with zero padding.
pub fn correlate(values: &[f64], rows: usize, cols: usize, kernel: &Kernel, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (i, krow) in kernel.iter().enumerate() {
                let rr = r as isize + i as isize - 1;
                if rr < 0 || rr >= rows as isize {
                    continue;
                }
                for (j, &k) in krow.iter().enumerate() {
                    let cc = c as isize + j as isize - 1;
                    if k != 0.0 && cc >= 0 && cc < cols as isize {
                        acc += k * values[rr as usize * cols + cc as usize];
                    }
                }
            }
            out[r * cols + c] = acc;
        }
    }
}

/// Filters a spectrogram with every kernel: a `1 x 4 x n x m` tensor.
pub fn apply_filter_bank(spec: &SpectrogramMatrix, bank: &FilterBank) -> Result<Tensor4<f64>> {
    let (rows, cols) = (spec.rows(), spec.cols());
    if rows < 3 || cols < 3 {
        return Err(Error::Shape(format!(
            "spectrogram {rows}x{cols} is smaller than the 3x3 filters"
        )));
    }
    let plane = rows * cols;
    let mut out = Tensor4::zeros([1, FILTERS, rows, cols]);
    for (k, kernel) in bank.kernels.iter().enumerate() {
        correlate(
            spec.values(),
            rows,
            cols,
            kernel,
            &mut out.data_mut()[k * plane..(k + 1) * plane],
        );
    }
    Ok(out)
}

/// Least-squares fit of each interior value from its eight neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionNeighborhood {
    /// `beta[0]` is the bias; `beta[t]` weighs neighbour `NEIGHBOURS[t-1]`.
    pub beta: [f64; 9],
    pub samples: usize,
}

pub const MIN_REGRESSION_SAMPLES: usize = 1000;

/// Ordinary least squares over every interior 3x3 neighbourhood.
pub fn fit_regression_filter(covers: &[SpectrogramMatrix]) -> Result<RegressionNeighborhood> {
    let mut gram = [[0.0f64; 9]; 9];
    let mut rhs = [0.0f64; 9];
    let mut samples = 0usize;
    for spec in covers {
        let (rows, cols) = (spec.rows(), spec.cols());
        for r in 1..rows.saturating_sub(1) {
            for c in 1..cols.saturating_sub(1) {
                let mut x = [1.0f64; 9];
                for (t, (dr, dc)) in NEIGHBOURS.iter().enumerate() {
                    x[t + 1] = spec.get((r as isize + dr) as usize, (c as isize + dc) as usize);
                }
                let y = spec.get(r, c);
                for i in 0..9 {
                    rhs[i] += x[i] * y;
                    for j in i..9 {
                        gram[i][j] += x[i] * x[j];
                    }
                }
                samples += 1;
            }
        }
    }
    if samples < MIN_REGRESSION_SAMPLES {
        return Err(Error::input(format!(
            "regression needs at least {MIN_REGRESSION_SAMPLES} interior neighbourhoods, got {samples}"
        )));
    }
    for i in 0..9 {
        for j in 0..i {
            gram[i][j] = gram[j][i];
        }
    }
    let beta = solve_spd(gram, rhs).ok_or(Error::DegenerateCoverSet)?;
    Ok(RegressionNeighborhood { beta, samples })
}

/// Cholesky solve; `None` when the matrix is numerically singular.
fn solve_spd(mut a: [[f64; 9]; 9], b: [f64; 9]) -> Option<[f64; 9]> {
    // scale to unit diagonal so the pivot test is relative
    let scale: Vec<f64> = (0..9).map(|i| a[i][i].sqrt()).collect();
    if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return None;
    }
    for i in 0..9 {
        for j in 0..9 {
            a[i][j] /= scale[i] * scale[j];
        }
    }
    for j in 0..9 {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if d <= 1e-12 {
            return None;
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..9 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    let mut y = [0.0; 9];
    for i in 0..9 {
        let mut s = b[i] / scale[i];
        for k in 0..i {
            s -= a[i][k] * y[k];
        }
        y[i] = s / a[i][i];
    }
    let mut x = [0.0; 9];
    for i in (0..9).rev() {
        let mut s = y[i];
        for k in i + 1..9 {
            s -= a[k][i] * x[k];
        }
        x[i] = s / a[i][i];
    }
    for i in 0..9 {
        x[i] /= scale[i];
    }
    Some(x)
}

impl RegressionNeighborhood {
    /// Coefficient of the neighbour at offset `(dr, dc)`.
    pub fn coefficient(&self, dr: isize, dc: isize) -> Option<f64> {
        NEIGHBOURS
            .iter()
            .position(|&o| o == (dr, dc))
            .map(|t| self.beta[t + 1])
    }

    /// Prediction residual as a kernel: `-1` at the centre, the fitted
    /// weights around it, bias dropped.
    pub fn as_residual_kernel(&self) -> Kernel {
        let mut k = [[0.0; 3]; 3];
        k[1][1] = -1.0;
        for (t, (dr, dc)) in NEIGHBOURS.iter().enumerate() {
            k[(dr + 1) as usize][(dc + 1) as usize] = self.beta[t + 1];
        }
        k
    }

    /// True when both frequency-axis neighbours outweigh every diagonal.
    pub fn vertical_dominates(&self) -> bool {
        let v = [(-1, 0), (1, 0)].map(|(r, c)| self.coefficient(r, c).unwrap().abs());
        let d = [(-1, -1), (-1, 1), (1, -1), (1, 1)]
            .map(|(r, c)| self.coefficient(r, c).unwrap().abs());
        let diag_max = d.iter().fold(0.0f64, |m, &x| m.max(x));
        v.iter().all(|&x| x > diag_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> SpectrogramMatrix {
        let values = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        SpectrogramMatrix::from_values(values, rows, cols, 2 * rows, 8000).unwrap()
    }

    fn channel(t: &Tensor4<f64>, k: usize) -> &[f64] {
        let p = t.plane();
        &t.data()[k * p..(k + 1) * p]
    }

    #[test]
    fn fixed_bank_is_zero_sum() {
        let bank = FilterBank::fixed();
        assert!(FilterBank::new(*bank.kernels()).is_ok());
        let out = apply_filter_bank(&grid(6, 7, |_, _| 3.5), &bank).unwrap();
        // interior only: the zero border breaks constancy at the edges
        for k in 0..FILTERS {
            for r in 1..5 {
                for c in 1..6 {
                    assert_eq!(channel(&out, k)[r * 7 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn first_difference_of_linear_rows() {
        let out = apply_filter_bank(&grid(8, 5, |r, _| 2.5 * r as f64), &FilterBank::fixed()).unwrap();
        for r in 0..7 {
            for c in 0..5 {
                assert_eq!(channel(&out, 0)[r * 5 + c], 2.5);
            }
        }
    }

    #[test]
    fn second_difference_of_quadratic_rows() {
        let out =
            apply_filter_bank(&grid(9, 4, |r, _| (r * r) as f64), &FilterBank::fixed()).unwrap();
        for r in 1..8 {
            for c in 0..4 {
                assert_eq!(channel(&out, 2)[r * 4 + c], 2.0);
            }
        }
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let bank = FilterBank::fixed();
        let out = apply_filter_bank(&grid(7, 7, |r, c| f64::from(r == 3 && c == 3)), &bank).unwrap();
        for (k, kernel) in bank.kernels().iter().enumerate() {
            for r in 0..7 {
                for c in 0..7 {
                    let (dr, dc) = (r as isize - 3, c as isize - 3);
                    let want = if dr.abs() <= 1 && dc.abs() <= 1 {
                        kernel[(1 - dr) as usize][(1 - dc) as usize]
                    } else {
                        0.0
                    };
                    assert_eq!(channel(&out, k)[r * 7 + c], want);
                }
            }
        }
    }

    #[test]
    fn rejects_small_and_non_zero_sum() {
        assert!(apply_filter_bank(&grid(2, 5, |_, _| 0.0), &FilterBank::fixed()).is_err());
        let mut k = *FilterBank::fixed().kernels();
        k[2][0][0] = 0.5;
        assert!(FilterBank::new(k).is_err());
    }

    #[test]
    fn text_round_trip() {
        let bank = FilterBank::fixed();
        assert_eq!(FilterBank::parse(&bank.to_text()).unwrap(), bank);
        assert!(FilterBank::parse("1 2 3").is_err());
        let bad = bank.to_text().replacen("-1.0", "-0.5", 1);
        assert!(FilterBank::parse(&bad).is_err());
    }

    #[test]
    fn constant_covers_are_degenerate() {
        let covers = vec![grid(40, 40, |_, _| 7.0)];
        assert!(matches!(
            fit_regression_filter(&covers),
            Err(Error::DegenerateCoverSet)
        ));
    }

    #[test]
    fn too_few_neighbourhoods() {
        let covers = vec![grid(10, 10, |r, c| (r * 31 + c * 17) as f64 % 7.0)];
        assert!(matches!(fit_regression_filter(&covers), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn residual_kernel_layout() {
        let mut beta = [0.0; 9];
        beta[2] = 0.4; // (-1, 0)
        beta[7] = 0.3; // (1, 0)
        let reg = RegressionNeighborhood { beta, samples: 0 };
        let k = reg.as_residual_kernel();
        assert_eq!(k, [[0.0, 0.4, 0.0], [0.0, -1.0, 0.0], [0.0, 0.3, 0.0]]);
        assert!(reg.vertical_dominates());
    }
}
