//! Call surfaces, Black-Scholes ground truth and Dupire local volatility.
//!
//! Rates and dividends are zero throughout, so `C(t, K)` is the undiscounted
//! expectation of `(S_t - K)^+` and the local volatility is
//! `σ_D(t, K)^2 = 2 ∂_t C / (K^2 ∂_K^2 C)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Convexity / calendar tolerance in price units.
pub const ARBITRAGE_TOLERANCE: f64 = 1e-12;
/// `∂_K^2 C` at or below this carries no local-vol information.
pub const DEGENERATE_CURVATURE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsParams {
    pub spot: f64,
    pub vol: f64,
    pub maturity: f64,
    pub strike: f64,
}

impl BsParams {
    pub fn new(spot: f64, vol: f64, maturity: f64, strike: f64) -> Result<Self> {
        for (name, value) in [("spot", spot), ("vol", vol), ("maturity", maturity), ("strike", strike)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::config(name, format!("must be positive and finite, got {value}")));
            }
        }
        Ok(Self {
            spot,
            vol,
            maturity,
            strike,
        })
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Black-Scholes call price with zero rate and dividend.
pub fn bs_call_price(p: &BsParams) -> f64 {
    let n = std_normal();
    let sd = p.vol * p.maturity.sqrt();
    let d1 = ((p.spot / p.strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    p.spot * n.cdf(d1) - p.strike * n.cdf(d2)
}

fn check_axis(name: &str, axis: &[f64], min_len: usize) -> Result<()> {
    if axis.len() < min_len {
        return Err(Error::config(name, format!("needs at least {min_len} points, got {}", axis.len())));
    }
    if axis.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::config(name, "values must be positive and finite"));
    }
    if axis.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config(name, "values must be strictly increasing"));
    }
    Ok(())
}

/// Grid of call prices `C(t_i, K_j)`, row-major by maturity.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSurface {
    spot: f64,
    maturities: Vec<f64>,
    strikes: Vec<f64>,
    prices: Vec<f64>,
}

impl CallSurface {
    pub fn new(spot: f64, maturities: Vec<f64>, strikes: Vec<f64>, prices: Vec<f64>) -> Result<Self> {
        if !(spot > 0.0) || !spot.is_finite() {
            return Err(Error::config("spot", "must be positive"));
        }
        check_axis("maturities", &maturities, 1)?;
        check_axis("strikes", &strikes, 1)?;
        if prices.len() != maturities.len() * strikes.len() {
            return Err(Error::Input(format!(
                "price grid has {} values, expected {} x {}",
                prices.len(),
                maturities.len(),
                strikes.len()
            )));
        }
        if let Some(k) = prices.iter().position(|p| !p.is_finite()) {
            return Err(Error::Input(format!("price {k} is not finite")));
        }
        Ok(Self {
            spot,
            maturities,
            strikes,
            prices,
        })
    }

    pub fn spot(&self) -> f64 {
        self.spot
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn price(&self, i: usize, j: usize) -> f64 {
        self.prices[i * self.strikes.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.strikes.len();
        &self.prices[i * n..(i + 1) * n]
    }

    /// Price at a listed maturity, linear in strike between nodes.
    pub fn price_at(&self, maturity: f64, strike: f64) -> Result<f64> {
        let i = self
            .maturities
            .iter()
            .position(|&t| (t - maturity).abs() <= 1e-12 * t.max(1.0))
            .ok_or_else(|| Error::Input(format!("maturity {maturity} is not on the surface grid")))?;
        let ks = &self.strikes;
        if strike < ks[0] || strike > ks[ks.len() - 1] {
            return Err(Error::Input(format!("strike {strike} outside the surface range")));
        }
        let j = ks.partition_point(|&k| k <= strike).clamp(1, ks.len().max(2) - 1);
        if ks.len() == 1 {
            return Ok(self.price(i, 0));
        }
        let w = (strike - ks[j - 1]) / (ks[j] - ks[j - 1]);
        Ok(self.price(i, j - 1) * (1.0 - w) + self.price(i, j) * w)
    }

    pub fn read_csv<R: Read>(spot: f64, reader: R) -> Result<Self> {
        let (maturities, strikes, prices) = read_grid_csv(reader)?;
        Self::new(spot, maturities, strikes, prices)
    }

    pub fn read_csv_path(spot: f64, path: &Path) -> Result<Self> {
        Self::read_csv(spot, std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_grid_csv(writer, &self.maturities, &self.strikes, &self.prices)
    }
}

/// Fills a surface with Black-Scholes prices at one flat volatility.
pub fn synthetic_surface(spot: f64, vol: f64, maturities: &[f64], strikes: &[f64]) -> Result<CallSurface> {
    check_axis("maturities", maturities, 1)?;
    check_axis("strikes", strikes, 1)?;
    let mut prices = Vec::with_capacity(maturities.len() * strikes.len());
    for &t in maturities {
        for &k in strikes {
            prices.push(bs_call_price(&BsParams::new(spot, vol, t, k)?));
        }
    }
    CallSurface::new(spot, maturities.to_vec(), strikes.to_vec(), prices)
}

/// Evenly spaced axis `start, start + step, ...` up to `stop` (inclusive within rounding).
pub fn axis_range(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(Error::config("axis", format!("bad range {start}..{stop} step {step}")));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| start + k as f64 * step).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for VolClamp {
    fn default() -> Self {
        Self { min: 0.05, max: 1.0 }
    }
}

impl VolClamp {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0) {
            return Err(Error::config("clamp.min", "lower volatility bound must be positive"));
        }
        if !(max >= min) || !max.is_finite() {
            return Err(Error::config("clamp.max", "upper volatility bound must be finite and >= min"));
        }
        Ok(Self { min, max })
    }
}

/// `σ_D(t, K)` on a (maturity, strike) grid, bilinear in `(t, log K)` with flat extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolSurface {
    spot: f64,
    maturities: Vec<f64>,
    strikes: Vec<f64>,
    log_strikes: Vec<f64>,
    values: Vec<f64>,
    clamp: VolClamp,
    clamp_activations: usize,
    degenerate_nodes: usize,
}

impl LocalVolSurface {
    /// Surface from node values; values are clamped into `clamp`.
    pub fn new(spot: f64, maturities: Vec<f64>, strikes: Vec<f64>, values: Vec<f64>, clamp: VolClamp) -> Result<Self> {
        check_axis("maturities", &maturities, 1)?;
        check_axis("strikes", &strikes, 1)?;
        if values.len() != maturities.len() * strikes.len() {
            return Err(Error::Input("local-vol grid shape mismatch".into()));
        }
        let clamp = VolClamp::new(clamp.min, clamp.max)?;
        let mut activations = 0;
        let values = values
            .into_iter()
            .map(|v| {
                let c = if v.is_nan() { clamp.max } else { v.clamp(clamp.min, clamp.max) };
                if c != v {
                    activations += 1;
                }
                c
            })
            .collect();
        let log_strikes = strikes.iter().map(|k| k.ln()).collect();
        Ok(Self {
            spot,
            maturities,
            strikes,
            log_strikes,
            values,
            clamp,
            clamp_activations: activations,
            degenerate_nodes: 0,
        })
    }

    /// Constant surface.
    pub fn flat(vol: f64) -> Result<Self> {
        let clamp = VolClamp::new(vol, vol)?;
        Self::new(1.0, vec![1.0], vec![1.0], vec![vol], clamp)
    }

    pub fn spot(&self) -> f64 {
        self.spot
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn clamp(&self) -> VolClamp {
        self.clamp
    }

    /// Nodes whose raw value fell outside the clamp.
    pub fn clamp_activations(&self) -> usize {
        self.clamp_activations
    }

    /// Nodes with no curvature information, filled from a row neighbour.
    pub fn degenerate_nodes(&self) -> usize {
        self.degenerate_nodes
    }

    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.strikes.len() + j]
    }

    /// Smallest and largest node value.
    pub fn value_range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// `σ_D(t, K)` for a strike in price units.
    pub fn value_at(&self, t: f64, strike: f64) -> f64 {
        self.local_vol_in_logspace(t, strike.ln())
    }

    /// `σ_D(t, e^x)`.
    pub fn local_vol_in_logspace(&self, t: f64, x: f64) -> f64 {
        self.at_time(t).value(x)
    }

    /// Strike slice interpolated at time `t`, for repeated lookups within one step.
    pub fn at_time(&self, t: f64) -> LocalVolSlice<'_> {
        let (i, w) = bracket(&self.maturities, t);
        let n = self.strikes.len();
        let row = if w == 0.0 || i + 1 == self.maturities.len() {
            self.values[i * n..(i + 1) * n].to_vec()
        } else {
            let (a, b) = (&self.values[i * n..(i + 1) * n], &self.values[(i + 1) * n..(i + 2) * n]);
            a.iter().zip(b).map(|(&a, &b)| a * (1.0 - w) + b * w).collect()
        };
        LocalVolSlice {
            log_strikes: &self.log_strikes,
            row,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_grid_csv(writer, &self.maturities, &self.strikes, &self.values)
    }

    pub fn read_csv<R: Read>(spot: f64, clamp: VolClamp, reader: R) -> Result<Self> {
        let (maturities, strikes, values) = read_grid_csv(reader)?;
        Self::new(spot, maturities, strikes, values, clamp)
    }
}

/// One maturity slice of a local-vol surface.
#[derive(Debug, Clone)]
pub struct LocalVolSlice<'a> {
    log_strikes: &'a [f64],
    row: Vec<f64>,
}

impl LocalVolSlice<'_> {
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let (j, w) = bracket(self.log_strikes, x);
        if w == 0.0 {
            self.row[j]
        } else {
            self.row[j] * (1.0 - w) + self.row[j + 1] * w
        }
    }
}

/// Left node and weight of the right node; flat outside the axis.
#[inline]
fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || !(x > axis[0]) {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 1, 0.0);
    }
    let j = axis.partition_point(|&a| a <= x) - 1;
    (j, (x - axis[j]) / (axis[j + 1] - axis[j]))
}

/// Finite-difference weights for derivative `order` at `x0` over `nodes` (Fornberg's recursion).
pub fn fd_weights(x0: f64, nodes: &[f64], order: usize) -> Vec<f64> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Stencil around index `i`: five nodes when two neighbours exist on each side,
/// three centred nodes one step from an edge, three one-sided nodes at an edge.
fn stencil(len: usize, i: usize) -> std::ops::Range<usize> {
    if i >= 2 && i + 2 < len {
        i - 2..i + 3
    } else if i >= 1 && i + 1 < len {
        i - 1..i + 2
    } else if i == 0 {
        0..3
    } else {
        len - 3..len
    }
}

fn derivative(axis: &[f64], values: impl Fn(usize) -> f64, i: usize, order: usize) -> f64 {
    let range = stencil(axis.len(), i);
    let w = fd_weights(axis[i], &axis[range.clone()], order);
    range.zip(w).map(|(k, w)| w * values(k)).sum()
}

fn check_no_arbitrage(surface: &CallSurface) -> Result<()> {
    let (ts, ks) = (surface.maturities(), surface.strikes());
    for (i, &t) in ts.iter().enumerate() {
        for j in 1..ks.len() - 1 {
            let left = (surface.price(i, j) - surface.price(i, j - 1)) / (ks[j] - ks[j - 1]);
            let right = (surface.price(i, j + 1) - surface.price(i, j)) / (ks[j + 1] - ks[j]);
            if right - left < -ARBITRAGE_TOLERANCE {
                return Err(Error::ButterflyArbitrage {
                    maturity: t,
                    strike: ks[j],
                    defect: right - left,
                });
            }
        }
    }
    for i in 1..ts.len() {
        for (j, &k) in ks.iter().enumerate() {
            let change = surface.price(i, j) - surface.price(i - 1, j);
            if change < -ARBITRAGE_TOLERANCE {
                return Err(Error::CalendarArbitrage {
                    maturity: ts[i],
                    strike: k,
                    decrease: -change,
                });
            }
        }
    }
    Ok(())
}

/// Dupire extraction with central differences (fourth order inside, lower order near edges).
///
/// Nodes where `∂_K^2 C` carries no information take the value of the nearest
/// informative node in the same maturity row.
pub fn dupire_local_vol(surface: &CallSurface, clamp: VolClamp) -> Result<LocalVolSurface> {
    let clamp = VolClamp::new(clamp.min, clamp.max)?;
    let (ts, ks) = (surface.maturities(), surface.strikes());
    if ts.len() < 3 || ks.len() < 3 {
        return Err(Error::Input("Dupire extraction needs at least 3 maturities and 3 strikes".into()));
    }
    check_no_arbitrage(surface)?;

    let (m, n) = (ts.len(), ks.len());
    let mut raw: Vec<Option<f64>> = Vec::with_capacity(m * n);
    for i in 0..m {
        for (j, &k) in ks.iter().enumerate() {
            let dt = derivative(ts, |r| surface.price(r, j), i, 1);
            let dkk = derivative(ks, |c| surface.price(i, c), j, 2);
            raw.push(if dkk <= DEGENERATE_CURVATURE {
                None
            } else if dt <= 0.0 {
                Some(0.0)
            } else {
                Some((2.0 * dt / (k * k * dkk)).sqrt())
            });
        }
    }

    let mut degenerate = 0;
    let mut values = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &raw[i * n..(i + 1) * n];
        for j in 0..n {
            let v = match row[j] {
                Some(v) => v,
                None => {
                    degenerate += 1;
                    nearest_informative(row, j).unwrap_or(clamp.max)
                }
            };
            values.push(v);
        }
    }
    let mut lv = LocalVolSurface::new(surface.spot(), ts.to_vec(), ks.to_vec(), values, clamp)?;
    lv.degenerate_nodes = degenerate;
    if lv.clamp_activations > 0 {
        log::info!("Dupire extraction clamped {} of {} nodes", lv.clamp_activations, m * n);
    }
    Ok(lv)
}

fn nearest_informative(row: &[Option<f64>], j: usize) -> Option<f64> {
    (1..row.len()).find_map(|d| {
        let left = j.checked_sub(d).and_then(|l| row[l]);
        let right = row.get(j + d).copied().flatten();
        left.or(right)
    })
}

fn write_grid_csv<W: Write>(writer: W, rows: &[f64], cols: &[f64], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["maturity".to_string()];
    header.extend(cols.iter().map(|k| k.to_string()));
    w.write_record(&header)?;
    for (i, t) in rows.iter().enumerate() {
        let mut record = vec![t.to_string()];
        record.extend(values[i * cols.len()..(i + 1) * cols.len()].iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

type Grid = (Vec<f64>, Vec<f64>, Vec<f64>);

fn read_grid_csv<R: Read>(reader: R) -> Result<Grid> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Input("surface CSV is empty".into()))??;
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Input(format!("cannot parse {what} `{s}` in surface CSV")))
    };
    let cols = header
        .iter()
        .skip(1)
        .map(|s| parse(s, "strike"))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for record in records {
        let record = record?;
        if record.len() != cols.len() + 1 {
            return Err(Error::Input(format!(
                "surface CSV row has {} fields, expected {}",
                record.len(),
                cols.len() + 1
            )));
        }
        rows.push(parse(&record[0], "maturity")?);
        for s in record.iter().skip(1) {
            values.push(parse(s, "price")?);
        }
    }
    Ok((rows, cols, values))
}
