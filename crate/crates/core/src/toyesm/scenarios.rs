//! Built-in forcing pathways.
//!
//! Every path is a function of fractional calendar year. Anchored paths use
//! monotone piecewise-cubic Hermite interpolation, so a path only peaks at
//! an anchor and never overshoots between anchors.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    PiControl,
    HistLike,
    Low,
    Mid,
    High,
    Overshoot,
    Abrupt4x,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::PiControl,
        Scenario::HistLike,
        Scenario::Low,
        Scenario::Mid,
        Scenario::High,
        Scenario::Overshoot,
        Scenario::Abrupt4x,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::PiControl => "picontrol",
            Scenario::HistLike => "hist-like",
            Scenario::Low => "low",
            Scenario::Mid => "mid",
            Scenario::High => "high",
            Scenario::Overshoot => "overshoot",
            Scenario::Abrupt4x => "abrupt4x",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Scenario::PiControl => "pre-industrial control, constant forcing",
            Scenario::HistLike => "historical-style ramp from 1850",
            Scenario::Low => "strong mitigation, CO2 peaks near 2040",
            Scenario::Mid => "middle-of-the-road, CO2 ~600 ppm by 2100",
            Scenario::High => "fossil-fuelled, CO2 ~1135 ppm by 2100",
            Scenario::Overshoot => "CO2 peaks in the 2060s then declines",
            Scenario::Abrupt4x => "CO2 quadrupled at month 0, other forcings repeat their first decade",
        }
    }

    pub fn start_year(self) -> i32 {
        match self {
            Scenario::PiControl | Scenario::HistLike | Scenario::Abrupt4x => 1850,
            _ => 2015,
        }
    }

    /// Whether the scenario branches from the end of the historical run.
    pub fn continues_history(self) -> bool {
        self.start_year() == 2015
    }

    /// Months covered by the full default run of the scenario.
    pub fn default_months(self) -> usize {
        match self {
            Scenario::PiControl | Scenario::Abrupt4x => 150 * 12,
            Scenario::HistLike => 165 * 12,
            _ => 86 * 12,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Monotone cubic Hermite interpolant (Fritsch–Carlson), clamped outside the
/// anchor range.
#[derive(Debug, Clone)]
pub(crate) struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(points: &[(f64, f64)]) -> Self {
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let n = xs.len();
        let secants: Vec<f64> = (0..n - 1)
            .map(|k| (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]))
            .collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes = vec![secants[0]; 2];
        } else {
            slopes[0] = secants[0];
            slopes[n - 1] = secants[n - 2];
            for k in 1..n - 1 {
                let (a, b) = (secants[k - 1], secants[k]);
                slopes[k] = if a * b <= 0.0 {
                    0.0
                } else {
                    let (h0, h1) = (xs[k] - xs[k - 1], xs[k + 1] - xs[k]);
                    let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                    (w1 + w2) / (w1 / a + w2 / b)
                };
            }
            // endpoint slopes must not exceed 3x the adjacent secant
            for (k, s) in [(0, 0), (n - 1, n - 2)] {
                if slopes[k] * secants[s] <= 0.0 {
                    slopes[k] = 0.0;
                } else if slopes[k].abs() > 3.0 * secants[s].abs() {
                    slopes[k] = 3.0 * secants[s];
                }
            }
        }
        Pchip { xs, ys, slopes }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let k = self.xs.partition_point(|&a| a <= x) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[k] + h10 * h * self.slopes[k] + h01 * self.ys[k + 1] + h11 * h * self.slopes[k + 1]
    }
}

/// Global drivers at one instant, before they are spread onto the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Drivers {
    pub co2: f64,
    pub ch4: f64,
    pub n2o: f64,
    pub ssi: f64,
    /// Multiplier of the aerosol base loads.
    pub aerosol: f64,
    /// Tropospheric ozone increase (ppb, pattern-weighted).
    pub o3_trop: f64,
    /// Stratospheric ozone depletion (ppb, pattern-weighted).
    pub o3_strat_loss: f64,
}

const HIST_END: f64 = 2015.0;

fn hist_co2(y: f64, c0: f64) -> f64 {
    c0 + (397.5 - c0) * ((y - 1850.0) / (HIST_END - 1850.0)).clamp(0.0, 1.0).powf(3.2)
}

fn hist_ch4(y: f64, c0: f64) -> f64 {
    c0 + (1831.0 - c0) * ((y - 1850.0) / (HIST_END - 1850.0)).clamp(0.0, 1.0).powf(2.4)
}

fn hist_n2o(y: f64, c0: f64) -> f64 {
    c0 + (328.0 - c0) * ((y - 1850.0) / (HIST_END - 1850.0)).clamp(0.0, 1.0).powf(2.6)
}

fn ssi(y: f64) -> f64 {
    1361.0 + 0.6 * (2.0 * PI * (y - 1850.0) / 11.0).sin()
}

pub(crate) struct PathSet {
    co2: Pchip,
    ch4: Pchip,
    n2o: Pchip,
    aerosol: Pchip,
    o3_trop: Pchip,
    o3_strat: Pchip,
}

fn hist_aerosol() -> Pchip {
    Pchip::new(&[(1850.0, 0.15), (1950.0, 0.6), (1980.0, 1.0), (2015.0, 0.9)])
}

fn hist_o3_trop() -> Pchip {
    Pchip::new(&[(1850.0, 0.0), (1950.0, 5.0), (2015.0, 15.0)])
}

fn hist_o3_strat() -> Pchip {
    Pchip::new(&[(1850.0, 0.0), (1970.0, 0.0), (2000.0, 40.0), (2015.0, 35.0)])
}

impl PathSet {
    fn ssp(co2: &[(f64, f64)], ch4: &[(f64, f64)], n2o: &[(f64, f64)], aer: &[(f64, f64)], o3t: &[(f64, f64)], o3s: &[(f64, f64)]) -> Self {
        PathSet {
            co2: Pchip::new(co2),
            ch4: Pchip::new(ch4),
            n2o: Pchip::new(n2o),
            aerosol: Pchip::new(aer),
            o3_trop: Pchip::new(o3t),
            o3_strat: Pchip::new(o3s),
        }
    }

    fn for_scenario(s: Scenario) -> Option<Self> {
        let p = match s {
            Scenario::Low => PathSet::ssp(
                &[(2015.0, 397.5), (2040.0, 440.0), (2100.0, 395.0)],
                &[(2015.0, 1831.0), (2050.0, 1300.0), (2100.0, 1000.0)],
                &[(2015.0, 328.0), (2060.0, 335.0), (2100.0, 330.0)],
                &[(2015.0, 0.9), (2050.0, 0.3), (2100.0, 0.15)],
                &[(2015.0, 15.0), (2100.0, 5.0)],
                &[(2015.0, 35.0), (2100.0, 5.0)],
            ),
            Scenario::Mid => PathSet::ssp(
                &[(2015.0, 397.5), (2060.0, 510.0), (2100.0, 603.0)],
                &[(2015.0, 1831.0), (2050.0, 2000.0), (2100.0, 1700.0)],
                &[(2015.0, 328.0), (2100.0, 355.0)],
                &[(2015.0, 0.9), (2100.0, 0.4)],
                &[(2015.0, 15.0), (2100.0, 18.0)],
                &[(2015.0, 35.0), (2100.0, 12.0)],
            ),
            Scenario::High => PathSet::ssp(
                &[(2015.0, 397.5), (2050.0, 560.0), (2080.0, 850.0), (2100.0, 1135.0)],
                &[(2015.0, 1831.0), (2060.0, 2800.0), (2100.0, 2500.0)],
                &[(2015.0, 328.0), (2100.0, 390.0)],
                &[(2015.0, 0.9), (2050.0, 0.9), (2100.0, 0.4)],
                &[(2015.0, 15.0), (2100.0, 25.0)],
                &[(2015.0, 35.0), (2100.0, 15.0)],
            ),
            Scenario::Overshoot => PathSet::ssp(
                &[(2015.0, 397.5), (2040.0, 490.0), (2062.0, 571.0), (2080.0, 540.0), (2100.0, 497.0)],
                &[(2015.0, 1831.0), (2050.0, 2100.0), (2100.0, 1500.0)],
                &[(2015.0, 328.0), (2070.0, 360.0), (2100.0, 350.0)],
                &[(2015.0, 0.9), (2100.0, 0.3)],
                &[(2015.0, 15.0), (2060.0, 20.0), (2100.0, 10.0)],
                &[(2015.0, 35.0), (2100.0, 10.0)],
            ),
            _ => return None,
        };
        Some(p)
    }
}

/// Reference (pre-industrial) concentrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Reference {
    pub co2: f64,
    pub ch4: f64,
    pub n2o: f64,
    pub aerosol: f64,
}

pub(crate) fn drivers_at(s: Scenario, month: usize, r: &Reference) -> Drivers {
    let start = s.start_year() as f64;
    let y = start + (month as f64 + 0.5) / 12.0;
    let pi = Drivers {
        co2: r.co2,
        ch4: r.ch4,
        n2o: r.n2o,
        ssi: ssi(y),
        aerosol: r.aerosol,
        o3_trop: 0.0,
        o3_strat_loss: 0.0,
    };
    match s {
        Scenario::PiControl => pi,
        Scenario::HistLike => Drivers {
            co2: hist_co2(y, r.co2),
            ch4: hist_ch4(y, r.ch4),
            n2o: hist_n2o(y, r.n2o),
            ssi: ssi(y),
            aerosol: hist_aerosol().eval(y),
            o3_trop: hist_o3_trop().eval(y),
            o3_strat_loss: hist_o3_strat().eval(y),
        },
        Scenario::Abrupt4x => {
            // everything but CO2 cycles through the first historical decade
            let h = drivers_at(Scenario::HistLike, month % 120, r);
            Drivers { co2: 4.0 * r.co2, ..h }
        }
        _ => {
            let p = PathSet::for_scenario(s).expect("ssp-family scenario");
            Drivers {
                co2: p.co2.eval(y),
                ch4: p.ch4.eval(y),
                n2o: p.n2o.eval(y),
                ssi: ssi(y),
                aerosol: p.aerosol.eval(y),
                o3_trop: p.o3_trop.eval(y),
                o3_strat_loss: p.o3_strat.eval(y),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pchip_hits_anchors_and_stays_monotone() {
        let p = Pchip::new(&[(0.0, 0.0), (1.0, 2.0), (3.0, 2.5), (4.0, 1.0)]);
        assert_eq!(p.eval(1.0), 2.0);
        assert_eq!(p.eval(3.0), 2.5);
        let mut prev = p.eval(0.0);
        for k in 1..=300 {
            let v = p.eval(k as f64 * 0.01);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
        // no overshoot above the peak anchor
        for k in 0..=400 {
            assert!(p.eval(k as f64 * 0.01) <= 2.5 + 1e-12);
        }
    }

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!(matches!("ssp999".parse::<Scenario>(), Err(Error::UnknownScenario(_))));
    }
}
