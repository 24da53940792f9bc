//! Proportional/integral/derivative structure of 1x3 kernels.
//!
//! Any 3-tap kernel [a, b, c] applied along a 3-frame time axis is a
//! unique mix of three primitive operators:
//!
//! * proportional  `[0, 1, 0]`   — sample the middle frame
//! * integral      `[1/3, 1/3, 1/3]` — average the window
//! * derivative    `[-1, 0, 1]`  — central difference
//!
//! Stacking two such layers reaches second-order structure, with
//! `[1, -2, 1]` as the discrete second derivative. Everything here is
//! f64: this is analysis arithmetic, not training arithmetic.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Proportional basis kernel.
pub const KERNEL_P: [f64; 3] = [0.0, 1.0, 0.0];
/// Integral basis kernel (window mean).
pub const KERNEL_I: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
/// First-derivative basis kernel (central difference).
pub const KERNEL_D: [f64; 3] = [-1.0, 0.0, 1.0];
/// Second-derivative kernel reached by stacking two first-order layers.
pub const KERNEL_D2: [f64; 3] = [1.0, -2.0, 1.0];

/// A 3-tap kernel on the time axis, taps ordered [before, at, after].
pub type Kernel3 = [f64; 3];

/// Weights on the proportional/integral/derivative basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidCoefficients {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

/// Weights on the second-order basis a two-layer stack exposes:
/// proportional, first derivative, second derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SecondOrderCoefficients {
    pub kp2: f64,
    pub kd2: f64,
    pub ks: f64,
}

/// Mix the three basis kernels into a single 3-tap kernel:
/// `kp * P + ki * I + kd * D`.
pub fn compose(k: PidCoefficients) -> Kernel3 {
    [
        k.ki / 3.0 - k.kd,
        k.kp + k.ki / 3.0,
        k.ki / 3.0 + k.kd,
    ]
}

/// Recover the unique basis weights of an arbitrary 3-tap kernel.
/// Exact inverse of [`compose`]: the basis spans all of R^3.
pub fn decompose(kernel: Kernel3) -> PidCoefficients {
    let [a, b, c] = kernel;
    PidCoefficients {
        kp: b - (a + c) / 2.0,
        ki: 3.0 * (a + c) / 2.0,
        kd: (c - a) / 2.0,
    }
}

/// Reinterpret first-order coefficients in the second-order basis that a
/// stacked pair of layers exposes.
pub fn to_second_order(k: PidCoefficients) -> SecondOrderCoefficients {
    SecondOrderCoefficients {
        kp2: k.kp + k.ki,
        kd2: k.kd,
        ks: k.ki / 3.0,
    }
}

/// A 3-sample signal window [before, at, after].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignalWindow {
    pub before: f64,
    pub at: f64,
    pub after: f64,
}

impl SignalWindow {
    pub fn new(before: f64, at: f64, after: f64) -> Self {
        SignalWindow { before, at, after }
    }

    /// First difference across the window: after - before.
    pub fn first_difference(&self) -> f64 {
        self.after - self.before
    }

    /// Second difference: after - 2*at + before.
    pub fn second_difference(&self) -> f64 {
        self.after - 2.0 * self.at + self.before
    }

    /// Window sum (the discrete integral over the three samples).
    pub fn integral(&self) -> f64 {
        self.before + self.at + self.after
    }

    /// Apply a 3-tap kernel to the window.
    pub fn respond(&self, kernel: Kernel3) -> f64 {
        kernel[0] * self.before + kernel[1] * self.at + kernel[2] * self.after
    }
}

/// Scalar nonlinearity applied after a single-layer response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScalarNonlinearity {
    Identity,
    Relu,
    Prelu(f64),
}

impl ScalarNonlinearity {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ScalarNonlinearity::Identity => z,
            ScalarNonlinearity::Relu => z.max(0.0),
            ScalarNonlinearity::Prelu(alpha) => {
                if z >= 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
        }
    }
}

/// Single layer of convolution plus nonlinearity on a window:
/// `g(kp * f(x) + (ki/3) * integral + kd * f')`.
pub fn single_layer_response(w: SignalWindow, c: PidCoefficients, g: ScalarNonlinearity) -> f64 {
    let z = c.kp * w.at + c.ki / 3.0 * w.integral() + c.kd * w.first_difference();
    g.apply(z)
}

/// The same response written in the second-order basis:
/// `g(kp2 * f(x) + kd2 * f' + ks * f'')`. Equal to
/// [`single_layer_response`] for all inputs.
pub fn single_layer_response_second_order(
    w: SignalWindow,
    c: SecondOrderCoefficients,
    g: ScalarNonlinearity,
) -> f64 {
    let z = c.kp2 * w.at + c.kd2 * w.first_difference() + c.ks * w.second_difference();
    g.apply(z)
}

/// One analyzed kernel row of a report: where it sits in the network and
/// its basis weights plus energy split.
#[derive(Clone, Debug)]
pub struct KernelReportRow {
    pub layer: String,
    pub out_channel: usize,
    pub in_channel: usize,
    /// Which 3-tap slice of the 3x3 kernel: rows "r0".."r2", columns
    /// "c0".."c2".
    pub axis: String,
    pub coeffs: PidCoefficients,
    /// Fraction of squared-coefficient energy in each basis direction;
    /// all zero for an all-zero kernel.
    pub energy: [f64; 3],
}

/// Decompose one kernel and compute its energy split.
pub fn analyze_kernel(
    layer: &str,
    out_channel: usize,
    in_channel: usize,
    axis: &str,
    kernel: Kernel3,
) -> KernelReportRow {
    let coeffs = decompose(kernel);
    let sq = [
        coeffs.kp * coeffs.kp,
        coeffs.ki * coeffs.ki,
        coeffs.kd * coeffs.kd,
    ];
    let total = sq[0] + sq[1] + sq[2];
    let energy = if total > 0.0 {
        [sq[0] / total, sq[1] / total, sq[2] / total]
    } else {
        [0.0, 0.0, 0.0]
    };
    KernelReportRow {
        layer: layer.to_string(),
        out_channel,
        in_channel,
        axis: axis.to_string(),
        coeffs,
        energy,
    }
}

/// Analyze every row and column of one 3x3 spatial kernel, taps given
/// row-major.
pub fn analyze_kernel_3x3(
    layer: &str,
    out_channel: usize,
    in_channel: usize,
    taps: &[f64; 9],
) -> Vec<KernelReportRow> {
    let mut rows = Vec::with_capacity(6);
    for r in 0..3 {
        let k = [taps[r * 3], taps[r * 3 + 1], taps[r * 3 + 2]];
        rows.push(analyze_kernel(layer, out_channel, in_channel, &format!("r{r}"), k));
    }
    for c in 0..3 {
        let k = [taps[c], taps[3 + c], taps[6 + c]];
        rows.push(analyze_kernel(layer, out_channel, in_channel, &format!("c{c}"), k));
    }
    rows
}

/// Render report rows as CSV with a pinned header.
pub fn report_to_csv(rows: &[KernelReportRow]) -> String {
    let mut out = String::from("layer,outc,inc,axis,kp,ki,kd,ep,ei,ed\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.layer,
            r.out_channel,
            r.in_channel,
            r.axis,
            r.coeffs.kp,
            r.coeffs.ki,
            r.coeffs.kd,
            r.energy[0],
            r.energy[1],
            r.energy[2]
        )
        .unwrap();
    }
    out
}

/// Parse a report CSV back into rows (round-trip of [`report_to_csv`]).
pub fn report_from_csv(text: &str) -> Result<Vec<KernelReportRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "layer,outc,inc,axis,kp,ki,kd,ep,ei,ed" {
        return Err(Error::Config(format!(
            "unexpected kernel report header: {header}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Config(format!(
                "kernel report line {} has {} fields, expected 10",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad number in kernel report: {s}")))
        };
        rows.push(KernelReportRow {
            layer: fields[0].to_string(),
            out_channel: fields[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad channel: {}", fields[1])))?,
            in_channel: fields[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad channel: {}", fields[2])))?,
            axis: fields[3].to_string(),
            coeffs: PidCoefficients {
                kp: num(fields[4])?,
                ki: num(fields[5])?,
                kd: num(fields[6])?,
            },
            energy: [num(fields[7])?, num(fields[8])?, num(fields[9])?],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn basis_kernels_compose_to_themselves() {
        assert_eq!(
            compose(PidCoefficients {
                kp: 1.0,
                ki: 0.0,
                kd: 0.0
            }),
            KERNEL_P
        );
        assert_eq!(
            compose(PidCoefficients {
                kp: 0.0,
                ki: 1.0,
                kd: 0.0
            }),
            KERNEL_I
        );
        assert_eq!(
            compose(PidCoefficients {
                kp: 0.0,
                ki: 0.0,
                kd: 1.0
            }),
            KERNEL_D
        );
    }

    #[test]
    fn second_derivative_mix() {
        // kp=-3, ki=3, kd=0 lands exactly on the [1, -2, 1] stencil.
        let k = compose(PidCoefficients {
            kp: -3.0,
            ki: 3.0,
            kd: 0.0,
        });
        assert_eq!(k, KERNEL_D2);
    }

    #[test]
    fn decompose_recovers_known_mixes() {
        let d = decompose(KERNEL_D2);
        assert!(close(d.kp, -3.0) && close(d.ki, 3.0) && close(d.kd, 0.0));
        let p = decompose(KERNEL_P);
        assert!(close(p.kp, 1.0) && close(p.ki, 0.0) && close(p.kd, 0.0));
    }

    #[test]
    fn second_order_view_of_the_second_derivative() {
        let c = to_second_order(decompose(KERNEL_D2));
        assert!(close(c.kp2, 0.0));
        assert!(close(c.kd2, 0.0));
        assert!(close(c.ks, 1.0));
    }

    #[test]
    fn window_operators_on_a_parabola() {
        // Samples of t^2 at t = -1, 0, 1: curvature 2, slope 0 at center.
        let w = SignalWindow::new(1.0, 0.0, 1.0);
        assert_eq!(w.first_difference(), 0.0);
        assert_eq!(w.second_difference(), 2.0);
        assert_eq!(w.integral(), 2.0);
        // Samples of 3t: slope 6 over the 2-step span.
        let lin = SignalWindow::new(-3.0, 0.0, 3.0);
        assert_eq!(lin.first_difference(), 6.0);
        assert_eq!(lin.second_difference(), 0.0);
    }

    #[test]
    fn layer_response_matches_kernel_application() {
        let c = PidCoefficients {
            kp: 2.0,
            ki: -1.0,
            kd: 0.5,
        };
        let w = SignalWindow::new(0.3, -0.8, 1.1);
        let direct = single_layer_response(w, c, ScalarNonlinearity::Identity);
        assert!(close(direct, w.respond(compose(c))));
    }

    #[test]
    fn second_difference_mix_extracts_curvature() {
        // f(x) = x^2 sampled at -1, 0, 1.
        let w = SignalWindow::new(1.0, 0.0, 1.0);
        let c = PidCoefficients {
            kp: -3.0,
            ki: 3.0,
            kd: 0.0,
        };
        let z = single_layer_response(w, c, ScalarNonlinearity::Identity);
        assert!(close(z, 2.0));
    }

    #[test]
    fn nonlinearities_gate_the_response() {
        let w = SignalWindow::new(0.0, -1.0, 0.0);
        let c = PidCoefficients {
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
        }; // z = -1
        assert_eq!(single_layer_response(w, c, ScalarNonlinearity::Relu), 0.0);
        assert_eq!(
            single_layer_response(w, c, ScalarNonlinearity::Prelu(0.25)),
            -0.25
        );
    }

    #[test]
    fn energy_fractions_sum_to_one_or_zero() {
        let row = analyze_kernel("block1.conv1", 0, 0, "r1", [0.5, -0.2, 0.9]);
        let s: f64 = row.energy.iter().sum();
        assert!(close(s, 1.0));
        let zero = analyze_kernel("block1.conv1", 0, 1, "c0", [0.0, 0.0, 0.0]);
        assert_eq!(zero.energy, [0.0, 0.0, 0.0]);
        assert_eq!(zero.coeffs.kp, 0.0);
    }

    #[test]
    fn kernel_3x3_analysis_covers_rows_and_columns() {
        // Center row is the second-difference stencil; columns are zero
        // except where the row passes through.
        let taps = [0.0, 0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 0.0, 0.0];
        let rows = analyze_kernel_3x3("block3.conv2", 5, 2, &taps);
        assert_eq!(rows.len(), 6);
        let r1 = rows.iter().find(|r| r.axis == "r1").unwrap();
        assert!(close(r1.coeffs.kp, -3.0));
        assert!(close(r1.coeffs.ki, 3.0));
        assert!(close(r1.coeffs.kd, 0.0));
        let r0 = rows.iter().find(|r| r.axis == "r0").unwrap();
        assert_eq!(r0.energy, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![
            analyze_kernel("block2.conv1", 3, 7, "r0", [0.25, -1.5, 0.75]),
            analyze_kernel("block5.conv2", 0, 0, "c2", [0.0, 0.0, 0.0]),
        ];
        let csv = report_to_csv(&rows);
        assert!(csv.starts_with("layer,outc,inc,axis,kp,ki,kd,ep,ei,ed\n"));
        let back = report_from_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].layer, "block2.conv1");
        assert_eq!(back[0].out_channel, 3);
        assert_eq!(back[0].in_channel, 7);
        assert_eq!(back[0].axis, "r0");
        assert!(close(back[0].coeffs.kp, rows[0].coeffs.kp));
        assert!(close(back[1].energy[2], 0.0));
    }

    proptest! {
        #[test]
        fn compose_decompose_round_trip(
            kp in -10.0f64..10.0,
            ki in -10.0f64..10.0,
            kd in -10.0f64..10.0,
        ) {
            let k = PidCoefficients { kp, ki, kd };
            let back = decompose(compose(k));
            prop_assert!((back.kp - kp).abs() < 1e-9);
            prop_assert!((back.ki - ki).abs() < 1e-9);
            prop_assert!((back.kd - kd).abs() < 1e-9);
        }

        #[test]
        fn decompose_compose_round_trip(
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
            c in -10.0f64..10.0,
        ) {
            let kernel = [a, b, c];
            let back = compose(decompose(kernel));
            for i in 0..3 {
                prop_assert!((back[i] - kernel[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn first_and_second_order_forms_agree(
            kp in -5.0f64..5.0,
            ki in -5.0f64..5.0,
            kd in -5.0f64..5.0,
            w0 in -5.0f64..5.0,
            w1 in -5.0f64..5.0,
            w2 in -5.0f64..5.0,
        ) {
            let c = PidCoefficients { kp, ki, kd };
            let w = SignalWindow::new(w0, w1, w2);
            let lhs = single_layer_response(w, c, ScalarNonlinearity::Identity);
            let rhs = single_layer_response_second_order(
                w, to_second_order(c), ScalarNonlinearity::Identity);
            prop_assert!((lhs - rhs).abs() < 1e-12_f64.max(rhs.abs() * 1e-12));
        }
    }
}
