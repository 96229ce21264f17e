//! Two-phase oil-water IMPES simulator with BHP-controlled wells.
//!
//! Fluids and rock are incompressible, with no gravity and no capillary
//! pressure. Each outer step solves the pressure equation implicitly with
//! two-point fluxes, harmonic-mean transmissibilities and upwind total
//! mobility, then advances water saturation explicitly in CFL-limited
//! sub-steps while the total fluxes are held fixed.
//!
//! Units: bar, mD, cP, m, day. Rates are reservoir volumes in m³/day.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geogen::{self, FaciesGrid};

/// q [m³/day] = DARCY · k [mD] · A [m²] · Δp [bar] / (µ [cP] · L [m]).
pub const DARCY: f64 = 0.008_527_02;

pub const INJECTOR_BHP: f64 = 330.0;
pub const PRODUCER_BHP: f64 = 300.0;
pub const WELL_RADIUS: f64 = 0.1;

/// Fraction of the explicit stability limit used per saturation sub-step.
const CFL: f64 = 0.95;
/// Saturation excursions below this are rounding and are clipped.
const SAT_TOL: f64 = 1e-6;
const MAX_UPWIND_ITERS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("invalid properties: {0}")]
    Props(String),
    #[error("invalid well: {0}")]
    Well(String),
    #[error("water saturation {sw} outside [{lo}, {hi}]")]
    Saturation { sw: f64, lo: f64, hi: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("pressure matrix not positive definite at row {0}")]
    Solver(usize),
    #[error("saturation overshoot {sw} in cell {cell}")]
    Overshoot { cell: usize, sw: f64 },
    #[error("no report step at t = {0} days")]
    MissingTime(f64),
    #[error(transparent)]
    Geogen(#[from] geogen::GeogenError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaciesRock {
    pub porosity: f64,
    /// mD.
    pub perm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RockFluidProps {
    /// Indexed by facies code: mud, levee, channel.
    pub facies: [FaciesRock; 3],
    pub mu_w: f64,
    pub mu_o: f64,
    pub krw_end: f64,
    pub kro_end: f64,
    pub nw: f64,
    pub no: f64,
    pub swc: f64,
    pub sor: f64,
    pub sw_init: f64,
    pub p_init: f64,
    /// Cell size (dx, dy, dz) in m.
    pub cell: [f64; 3],
}

impl Default for RockFluidProps {
    fn default() -> Self {
        Self {
            facies: [
                FaciesRock { porosity: 0.05, perm: 50.0 },
                FaciesRock { porosity: 0.15, perm: 400.0 },
                FaciesRock { porosity: 0.2, perm: 2500.0 },
            ],
            mu_w: 0.31,
            mu_o: 1.09,
            krw_end: 0.4,
            kro_end: 1.0,
            nw: 2.0,
            no: 2.0,
            swc: 0.1,
            sor: 0.2,
            sw_init: 0.1,
            p_init: 310.0,
            cell: [20.0, 20.0, 5.0],
        }
    }
}

fn pow(s: f64, n: f64) -> f64 {
    if n == 2.0 {
        s * s
    } else {
        s.powf(n)
    }
}

impl RockFluidProps {
    /// Same fluids, new per-facies porosity and permeability (mD).
    pub fn with_facies(&self, porosity: [f64; 3], perm: [f64; 3]) -> Self {
        let mut p = self.clone();
        for c in 0..3 {
            p.facies[c] = FaciesRock { porosity: porosity[c], perm: perm[c] };
        }
        p
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: String| Err(FlowError::Props(m));
        for (c, f) in self.facies.iter().enumerate() {
            if !(f.porosity > 0.0 && f.porosity < 1.0) {
                return bad(format!("facies {c} porosity {} not in (0, 1)", f.porosity));
            }
            if !(f.perm > 0.0 && f.perm.is_finite()) {
                return bad(format!("facies {c} permeability {} not positive", f.perm));
            }
        }
        let positive = [
            ("mu_w", self.mu_w),
            ("mu_o", self.mu_o),
            ("krw_end", self.krw_end),
            ("kro_end", self.kro_end),
            ("nw", self.nw),
            ("no", self.no),
            ("p_init", self.p_init),
            ("dx", self.cell[0]),
            ("dy", self.cell[1]),
            ("dz", self.cell[2]),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.swc >= 0.0 && self.sor >= 0.0 && self.swc < 1.0 - self.sor) {
            return bad(format!("need 0 <= swc < 1 - sor, got swc {} sor {}", self.swc, self.sor));
        }
        if !(self.sw_init >= self.swc && self.sw_init <= 1.0 - self.sor) {
            return bad(format!("initial sw {} outside [swc, 1 - sor]", self.sw_init));
        }
        Ok(())
    }

    fn effective(&self, sw: f64) -> f64 {
        ((sw - self.swc) / (1.0 - self.swc - self.sor)).clamp(0.0, 1.0)
    }

    fn kr(&self, sw: f64) -> (f64, f64) {
        let s = self.effective(sw);
        (self.krw_end * pow(s, self.nw), self.kro_end * pow(1.0 - s, self.no))
    }

    /// Phase mobilities kr/µ (1/cP).
    pub fn mobilities(&self, sw: f64) -> (f64, f64) {
        let (krw, kro) = self.kr(sw);
        (krw / self.mu_w, kro / self.mu_o)
    }

    pub fn total_mobility(&self, sw: f64) -> f64 {
        let (lw, lo) = self.mobilities(sw);
        lw + lo
    }

    /// Water fractional flow.
    pub fn frac_flow(&self, sw: f64) -> f64 {
        let (lw, lo) = self.mobilities(sw);
        lw / (lw + lo)
    }

    /// Upper bound on df/dSw over [swc, 1 - sor].
    fn max_frac_flow_slope(&self) -> f64 {
        const N: usize = 4000;
        let lo = self.swc;
        let h = (1.0 - self.sor - self.swc) / N as f64;
        let mut best: f64 = 0.0;
        for k in 0..N {
            let a = lo + k as f64 * h;
            best = best.max((self.frac_flow(a + h) - self.frac_flow(a)) / h);
        }
        // Chord slopes on a fine grid undershoot the peak tangent slightly.
        best * 1.05
    }
}

/// Corey relative permeabilities (krw, kro).
pub fn relperm(sw: f64, props: &RockFluidProps) -> Result<(f64, f64), FlowError> {
    let (lo, hi) = (props.swc, 1.0 - props.sor);
    if !(sw >= lo - 1e-12 && sw <= hi + 1e-12) {
        return Err(FlowError::Saturation { sw, lo, hi });
    }
    Ok(props.kr(sw))
}

/// Per-cell porosity and permeability (mD), row-major like the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CellProps {
    pub porosity: Vec<f64>,
    pub perm: Vec<f64>,
}

pub fn assign_properties(grid: &FaciesGrid, props: &RockFluidProps) -> Result<CellProps, FlowError> {
    let mut porosity = Vec::with_capacity(grid.codes().len());
    let mut perm = Vec::with_capacity(grid.codes().len());
    for &c in grid.codes() {
        let f = props
            .facies
            .get(c as usize)
            .ok_or_else(|| FlowError::Props(format!("unknown facies code {c}")))?;
        porosity.push(f.porosity);
        perm.push(f.perm);
    }
    Ok(CellProps { porosity, perm })
}

/// Peaceman equivalent radius for an anisotropic cell.
pub fn peaceman_radius(dx: f64, dy: f64, kx: f64, ky: f64) -> f64 {
    let (a, b) = (ky / kx, kx / ky);
    0.28 * (a.sqrt() * dx * dx + b.sqrt() * dy * dy).sqrt() / (a.powf(0.25) + b.powf(0.25))
}

/// Well index (m³/day per bar per 1/cP) of a vertical well.
pub fn peaceman_index(dx: f64, dy: f64, dz: f64, kx: f64, ky: f64, rw: f64) -> Result<f64, FlowError> {
    if [dx, dy, dz, kx, ky, rw].iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(FlowError::Well(format!(
            "non-positive geometry or permeability: dx {dx} dy {dy} dz {dz} kx {kx} ky {ky} rw {rw}"
        )));
    }
    let r0 = peaceman_radius(dx, dy, kx, ky);
    if r0 <= rw {
        return Err(FlowError::Well(format!("equivalent radius {r0} not larger than wellbore radius {rw}")));
    }
    Ok(DARCY * 2.0 * std::f64::consts::PI * (kx * ky).sqrt() * dz / (r0 / rw).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WellKind {
    Injector,
    Producer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSpec {
    pub name: String,
    pub i: usize,
    pub j: usize,
    pub kind: WellKind,
    /// bar.
    pub bhp: f64,
    /// m.
    pub rw: f64,
}

/// The five-well pattern at the hard-data cells: injectors I1-I3, producers P1-P2.
pub fn paper_wells(nx: usize, ny: usize) -> Vec<WellSpec> {
    geogen::well_pattern(nx, ny)
        .into_iter()
        .map(|(name, i, j)| {
            let injector = name.starts_with('I');
            WellSpec {
                name: name.to_string(),
                i,
                j,
                kind: if injector { WellKind::Injector } else { WellKind::Producer },
                bhp: if injector { INJECTOR_BHP } else { PRODUCER_BHP },
                rw: WELL_RADIUS,
            }
        })
        .collect()
}

/// Average rates over one report interval (m³/day, nonnegative in the well's role).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WellRates {
    pub water_inj: f64,
    pub oil_prod: f64,
    pub water_prod: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WellSeries {
    /// Report times (days), end of each interval.
    pub times: Vec<f64>,
    pub wells: Vec<String>,
    pub kinds: Vec<WellKind>,
    /// `rates[step][well]`.
    pub rates: Vec<Vec<WellRates>>,
    /// Cumulative volume-balance error relative to injected volume, per report.
    pub balance: Vec<f64>,
}

impl WellSeries {
    pub fn field_totals(&self, step: usize) -> WellRates {
        self.rates[step].iter().fold(WellRates::default(), |a, r| WellRates {
            water_inj: a.water_inj + r.water_inj,
            oil_prod: a.oil_prod + r.oil_prod,
            water_prod: a.water_prod + r.water_prod,
        })
    }

    pub fn well_index(&self, name: &str) -> Option<usize> {
        self.wells.iter().position(|w| w == name)
    }

    /// Cumulative volumes (injected water, produced oil, produced water) at the last report.
    pub fn cumulative(&self) -> WellRates {
        let mut out = WellRates::default();
        let mut t0 = 0.0;
        for (k, &t) in self.times.iter().enumerate() {
            let f = self.field_totals(k);
            out.water_inj += f.water_inj * (t - t0);
            out.oil_prod += f.oil_prod * (t - t0);
            out.water_prod += f.water_prod * (t - t0);
            t0 = t;
        }
        out
    }

    /// Long-format CSV: time, well, phase, rate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,well,phase,rate\n");
        for (k, &t) in self.times.iter().enumerate() {
            for (w, name) in self.wells.iter().enumerate() {
                let r = self.rates[k][w];
                match self.kinds[w] {
                    WellKind::Injector => {
                        let _ = writeln!(s, "{t},{name},water_inj,{}", r.water_inj);
                    }
                    WellKind::Producer => {
                        let _ = writeln!(s, "{t},{name},oil,{}", r.oil_prod);
                        let _ = writeln!(s, "{t},{name},water,{}", r.water_prod);
                    }
                }
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    /// bar.
    pub pressure: Vec<f64>,
    pub sw: Vec<f64>,
    /// Cumulative volumes (m³).
    pub injected: f64,
    pub produced_oil: f64,
    pub produced_water: f64,
    /// Saturation sub-steps taken.
    pub substeps: usize,
}

/// Symmetric positive definite banded matrix, lower band stored row-wise.
/// Row `i` holds columns `i - bw ..= i` at offsets `0 ..= bw`.
struct Banded {
    n: usize,
    bw: usize,
    a: Vec<f64>,
}

impl Banded {
    fn new(n: usize, bw: usize) -> Self {
        Self { n, bw, a: vec![0.0; n * (bw + 1)] }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        self.a[i * (self.bw + 1) + j + self.bw - i] += v;
    }

    /// In-place Cholesky, then solve for `b`.
    fn solve(mut self, b: &mut [f64]) -> Result<(), FlowError> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(bw));
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                let mut s = self.a[ri + j];
                for k in k0..j {
                    s -= self.a[ri + k] * self.a[rj + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(FlowError::Solver(i));
                    }
                    self.a[ri + i] = s.sqrt();
                } else {
                    self.a[ri + j] = s / self.a[rj + j];
                }
            }
        }
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.a[ri + k] * b[k];
            }
            b[i] = s / self.a[ri + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.a[k * w + bw - k + i] * b[k];
            }
            b[i] = s / self.a[i * w + bw];
        }
        Ok(())
    }
}

struct Well {
    cell: usize,
    kind: WellKind,
    bhp: f64,
    index: f64,
}

/// Run to `t_end` with report steps every `max_dt` days.
pub fn simulate(
    grid: &FaciesGrid,
    props: &RockFluidProps,
    wells: &[WellSpec],
    t_end: f64,
    max_dt: f64,
) -> Result<WellSeries, FlowError> {
    simulate_with_state(grid, props, wells, t_end, max_dt).map(|(s, _)| s)
}

pub fn simulate_with_state(
    grid: &FaciesGrid,
    props: &RockFluidProps,
    wells: &[WellSpec],
    t_end: f64,
    max_dt: f64,
) -> Result<(WellSeries, SimState), FlowError> {
    props.validate()?;
    let cells = assign_properties(grid, props)?;
    simulate_cells(grid.nx(), grid.ny(), &cells, props, wells, t_end, max_dt)
}

/// Simulation on explicit per-cell properties.
pub fn simulate_cells(
    nx: usize,
    ny: usize,
    cells: &CellProps,
    props: &RockFluidProps,
    wells: &[WellSpec],
    t_end: f64,
    max_dt: f64,
) -> Result<(WellSeries, SimState), FlowError> {
    props.validate()?;
    let n = nx * ny;
    if cells.porosity.len() != n || cells.perm.len() != n {
        return Err(FlowError::Argument(format!("cell properties do not match {nx}x{ny}")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) || !(max_dt > 0.0 && max_dt.is_finite()) {
        return Err(FlowError::Argument(format!("need t_end >= 0 and max_dt > 0, got {t_end}, {max_dt}")));
    }
    let [dx, dy, dz] = props.cell;
    let pv: Vec<f64> = cells.porosity.iter().map(|&p| p * dx * dy * dz).collect();

    // Faces: (a, b, transmissibility).
    let mut faces: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * n);
    let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
    for j in 0..ny {
        for i in 0..nx {
            let c = j * nx + i;
            if i + 1 < nx {
                faces.push((c, c + 1, DARCY * harmonic(cells.perm[c], cells.perm[c + 1]) * dy * dz / dx));
            }
            if j + 1 < ny {
                faces.push((c, c + nx, DARCY * harmonic(cells.perm[c], cells.perm[c + nx]) * dx * dz / dy));
            }
        }
    }

    let mut ws = Vec::with_capacity(wells.len());
    for w in wells {
        if w.i >= nx || w.j >= ny {
            return Err(FlowError::Well(format!("{} at ({}, {}) outside {nx}x{ny}", w.name, w.i, w.j)));
        }
        if !(w.bhp > 0.0 && w.bhp.is_finite()) {
            return Err(FlowError::Well(format!("{} has invalid BHP {}", w.name, w.bhp)));
        }
        let cell = w.j * nx + w.i;
        let k = cells.perm[cell];
        ws.push(Well { cell, kind: w.kind, bhp: w.bhp, index: peaceman_index(dx, dy, dz, k, k, w.rw)? });
    }

    // Row ordering with the smaller bandwidth.
    let (order, bw): (Vec<usize>, usize) = if nx <= ny {
        ((0..n).collect(), nx)
    } else {
        let mut o = vec![0; n];
        for j in 0..ny {
            for i in 0..nx {
                o[j * nx + i] = i * ny + j;
            }
        }
        (o, ny)
    };

    let slope = props.max_frac_flow_slope();
    let mut p = vec![props.p_init; n];
    let mut sw = vec![props.sw_init; n];
    let water0: f64 = pv.iter().zip(&sw).map(|(v, s)| v * s).sum();
    let oil0: f64 = pv.iter().zip(&sw).map(|(v, s)| v * (1.0 - s)).sum();
    let (mut inj, mut prod_o, mut prod_w) = (0.0f64, 0.0f64, 0.0f64);
    let mut series = WellSeries {
        times: Vec::new(),
        wells: wells.iter().map(|w| w.name.clone()).collect(),
        kinds: wells.iter().map(|w| w.kind).collect(),
        rates: Vec::new(),
        balance: Vec::new(),
    };
    let mut substeps = 0usize;
    let mut face_flux = vec![0.0; faces.len()];
    let mut well_flux = vec![0.0; ws.len()];
    let mut fw = vec![0.0; n];
    let mut dsw = vec![0.0; n];

    let mut t = 0.0;
    let mut step = 0usize;
    while t < t_end - 1e-9 * t_end.max(1.0) {
        step += 1;
        let t_next = (step as f64 * max_dt).min(t_end);
        let dt = t_next - t;

        let mut shut = vec![false; ws.len()];
        if ws.is_empty() {
            face_flux.iter_mut().for_each(|q| *q = 0.0);
        } else {
            let (dir, closed) = solve_pressure(&faces, &ws, &sw, props, &order, bw, &mut p)?;
            for (f, &(a, b, tr)) in faces.iter().enumerate() {
                face_flux[f] = tr * face_mobility(dir[f], &sw, a, b, props) * (p[a] - p[b]);
            }
            shut = closed;
        }
        // Positive well flux is production.
        for (k, w) in ws.iter().enumerate() {
            well_flux[k] =
                if shut[k] { 0.0 } else { w.index * props.total_mobility(sw[w.cell]) * (p[w.cell] - w.bhp) };
        }

        // Stable explicit step from the outflow of each cell.
        let mut outflow = vec![0.0; n];
        for (f, &(a, b, _)) in faces.iter().enumerate() {
            let q = face_flux[f];
            if q > 0.0 {
                outflow[a] += q;
            } else {
                outflow[b] -= q;
            }
        }
        for (k, w) in ws.iter().enumerate() {
            outflow[w.cell] += well_flux[k].max(0.0);
        }
        let mut dt_stable = f64::INFINITY;
        for c in 0..n {
            if outflow[c] > 0.0 {
                dt_stable = dt_stable.min(pv[c] / (slope * outflow[c]));
            }
        }
        let n_sub = if dt_stable.is_finite() { (dt / (CFL * dt_stable)).ceil().max(1.0) as usize } else { 1 };
        let h = dt / n_sub as f64;
        substeps += n_sub;

        let mut step_rates = vec![WellRates::default(); ws.len()];
        for _ in 0..n_sub {
            for c in 0..n {
                fw[c] = props.frac_flow(sw[c]);
            }
            dsw.iter_mut().for_each(|d| *d = 0.0);
            for (f, &(a, b, _)) in faces.iter().enumerate() {
                let q = face_flux[f];
                let qw = if q > 0.0 { q * fw[a] } else { q * fw[b] };
                dsw[a] -= qw;
                dsw[b] += qw;
            }
            for (k, w) in ws.iter().enumerate() {
                let q = well_flux[k];
                if w.kind == WellKind::Producer {
                    let qw = q * fw[w.cell];
                    dsw[w.cell] -= qw;
                    step_rates[k].water_prod += qw * h;
                    step_rates[k].oil_prod += (q - qw) * h;
                    prod_w += qw * h;
                    prod_o += (q - qw) * h;
                } else {
                    dsw[w.cell] -= q;
                    step_rates[k].water_inj -= q * h;
                    inj -= q * h;
                }
            }
            for c in 0..n {
                let s = sw[c] + h * dsw[c] / pv[c];
                if s < props.swc - SAT_TOL || s > 1.0 - props.sor + SAT_TOL || !s.is_finite() {
                    return Err(FlowError::Overshoot { cell: c, sw: s });
                }
                sw[c] = s.clamp(props.swc, 1.0 - props.sor);
            }
        }

        for r in step_rates.iter_mut() {
            r.water_inj /= dt;
            r.oil_prod /= dt;
            r.water_prod /= dt;
        }
        let water: f64 = pv.iter().zip(&sw).map(|(v, s)| v * s).sum();
        let oil: f64 = pv.iter().zip(&sw).map(|(v, s)| v * (1.0 - s)).sum();
        let err_w = (inj - prod_w - (water - water0)).abs();
        let err_o = (-prod_o - (oil - oil0)).abs();
        let scale = inj.max(prod_o + prod_w);
        series.balance.push(if scale > 0.0 { err_w.max(err_o) / scale } else { 0.0 });
        series.times.push(t_next);
        series.rates.push(step_rates);
        t = t_next;
    }

    let state = SimState { pressure: p, sw, injected: inj, produced_oil: prod_o, produced_water: prod_w, substeps };
    Ok((series, state))
}

/// Implicit pressure solve. Face mobilities are upwinded on the previous
/// pressure and re-solved until the flow directions are consistent.
fn solve_pressure(
    faces: &[(usize, usize, f64)],
    wells: &[Well],
    sw: &[f64],
    props: &RockFluidProps,
    order: &[usize],
    bw: usize,
    p: &mut [f64],
) -> Result<(Vec<i8>, Vec<bool>), FlowError> {
    let n = sw.len();
    // Direction used for each face: +1 a upstream, -1 b upstream, 0 average.
    let mut dir: Vec<i8> = faces.iter().map(|&(a, b, _)| sign(p[a] - p[b])).collect();
    let mut shut = vec![false; wells.len()];
    for iter in 0..MAX_UPWIND_ITERS {
        let mut m = Banded::new(n, bw);
        let mut rhs = vec![0.0; n];
        for (f, &(a, b, tr)) in faces.iter().enumerate() {
            let c = tr * face_mobility(dir[f], sw, a, b, props);
            let (ra, rb) = (order[a], order[b]);
            m.add(ra, ra, c);
            m.add(rb, rb, c);
            m.add(ra, rb, -c);
        }
        let mut any_open = false;
        for (k, w) in wells.iter().enumerate() {
            if shut[k] {
                continue;
            }
            any_open = true;
            let c = w.index * props.total_mobility(sw[w.cell]);
            let r = order[w.cell];
            m.add(r, r, c);
            rhs[r] += c * w.bhp;
        }
        if !any_open {
            return Ok((dir, shut));
        }
        m.solve(&mut rhs)?;
        for c in 0..n {
            p[c] = rhs[order[c]];
        }
        if iter + 1 == MAX_UPWIND_ITERS {
            break;
        }

        let mut next_dir = dir.clone();
        let mut next_shut = shut.clone();
        for (f, &(a, b, _)) in faces.iter().enumerate() {
            let s = sign(p[a] - p[b]);
            if s != 0 {
                next_dir[f] = s;
            }
        }
        for (k, w) in wells.iter().enumerate() {
            next_shut[k] |= match w.kind {
                WellKind::Producer => p[w.cell] < w.bhp - 1e-9,
                WellKind::Injector => p[w.cell] > w.bhp + 1e-9,
            };
        }
        if next_dir == dir && next_shut == shut {
            break;
        }
        dir = next_dir;
        shut = next_shut;
    }
    Ok((dir, shut))
}

fn face_mobility(dir: i8, sw: &[f64], a: usize, b: usize, props: &RockFluidProps) -> f64 {
    match dir {
        1 => props.total_mobility(sw[a]),
        -1 => props.total_mobility(sw[b]),
        _ => 0.5 * (props.total_mobility(sw[a]) + props.total_mobility(sw[b])),
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Observation vector, time-major. At each time `every, 2·every, ..., until`:
/// oil rate of each producer, then water rate of each producer, then water
/// injection rate of each injector (wells in series order).
pub fn extract_observations(series: &WellSeries, every: f64, until: f64) -> Result<Vec<f64>, FlowError> {
    let times = observation_times(every, until)?;
    let producers: Vec<usize> = (0..series.wells.len()).filter(|&w| series.kinds[w] == WellKind::Producer).collect();
    let injectors: Vec<usize> = (0..series.wells.len()).filter(|&w| series.kinds[w] == WellKind::Injector).collect();
    let mut out = Vec::with_capacity(times.len() * (2 * producers.len() + injectors.len()));
    for t in times {
        let k = series
            .times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-6 * t.max(1.0))
            .ok_or(FlowError::MissingTime(t))?;
        let r = &series.rates[k];
        out.extend(producers.iter().map(|&w| r[w].oil_prod));
        out.extend(producers.iter().map(|&w| r[w].water_prod));
        out.extend(injectors.iter().map(|&w| r[w].water_inj));
    }
    Ok(out)
}

/// Labels matching [`extract_observations`], e.g. `t100:P1:oil`.
pub fn observation_labels(series: &WellSeries, every: f64, until: f64) -> Result<Vec<String>, FlowError> {
    let times = observation_times(every, until)?;
    let names = |kind| {
        series.wells.iter().zip(&series.kinds).filter(move |(_, &k)| k == kind).map(|(w, _)| w.clone())
    };
    let mut out = Vec::new();
    for t in times {
        out.extend(names(WellKind::Producer).map(|w| format!("t{t}:{w}:oil")));
        out.extend(names(WellKind::Producer).map(|w| format!("t{t}:{w}:water")));
        out.extend(names(WellKind::Injector).map(|w| format!("t{t}:{w}:water_inj")));
    }
    Ok(out)
}

fn observation_times(every: f64, until: f64) -> Result<Vec<f64>, FlowError> {
    if !(every > 0.0 && every.is_finite()) || !(until >= 0.0 && until.is_finite()) {
        return Err(FlowError::Argument(format!("need every > 0 and until >= 0, got {every}, {until}")));
    }
    let count = (until / every + 1e-9).floor() as usize;
    Ok((1..=count).map(|k| k as f64 * every).collect())
}

/// Split a time-major observation vector into rows of `per_time` values.
pub fn unstack_observations(v: &[f64], per_time: usize) -> Result<Vec<Vec<f64>>, FlowError> {
    if per_time == 0 || v.len() % per_time != 0 {
        return Err(FlowError::Argument(format!("{} values do not split into rows of {per_time}", v.len())));
    }
    Ok(v.chunks(per_time).map(<[f64]>::to_vec).collect())
}

pub fn stack_observations(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banded_solve_matches_dense() {
        // Tridiagonal plus a far band, bw = 3.
        let n = 9;
        let bw = 3;
        let mut dense = vec![vec![0.0; n]; n];
        let mut m = Banded::new(n, bw);
        for i in 0..n {
            dense[i][i] = 4.0 + i as f64 * 0.1;
            m.add(i, i, dense[i][i]);
            if i + 1 < n {
                dense[i][i + 1] = -1.0;
                dense[i + 1][i] = -1.0;
                m.add(i, i + 1, -1.0);
            }
            if i + 3 < n {
                dense[i][i + 3] = -0.5;
                dense[i + 3][i] = -0.5;
                m.add(i + 3, i, -0.5);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b: Vec<f64> = (0..n).map(|i| (0..n).map(|j| dense[i][j] * x[j]).sum()).collect();
        m.solve(&mut b).unwrap();
        for i in 0..n {
            assert!((b[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut m = Banded::new(2, 1);
        m.add(0, 0, 1.0);
        m.add(1, 1, 1.0);
        m.add(1, 0, 2.0);
        assert!(matches!(m.solve(&mut [1.0, 1.0]), Err(FlowError::Solver(1))));
    }
}
