//! Vehicle traces: CSV ingestion, a random-waypoint generator, grid binning,
//! per-unit demand and the propagation delay matrix.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{DelayModel, EdgeNode, ModelError, Point, ServiceRequest};
use crate::num::{compensated_sum, Scalar};

const KM_PER_DEG_LAT: f64 = 110.574;
const KM_PER_DEG_LON_EQ: f64 = 111.320;

#[derive(Debug, Error)]
pub enum MobilityError {
    #[error("cannot read trace {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("trace header must contain vehicle_id,timestamp,lat,lon; found {0:?}")]
    Header(Vec<String>),
    #[error("no usable rows ({malformed} malformed, {dropped} outside the area)")]
    NoUsableRows { malformed: usize, dropped: usize },
    #[error("invalid {what}: {detail}")]
    InvalidParameter { what: &'static str, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(what: &'static str, detail: impl Into<String>) -> MobilityError {
    MobilityError::InvalidParameter { what, detail: detail.into() }
}

/// One row of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub vehicle_id: String,
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub lat: f64,
    pub lon: f64,
}

/// Rectangular coverage area split into equal square cells, one edge node per
/// cell. Node `r * cols + c` sits at the centre of row `r`, column `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMap<T> {
    pub origin: Point<T>,
    pub cell_km: T,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Scalar> Default for GridMap<T> {
    fn default() -> Self {
        Self { origin: Point::new(T::zero(), T::zero()), cell_km: T::lit(5.0), rows: 3, cols: 3 }
    }
}

impl<T: Scalar> GridMap<T> {
    pub fn new(rows: usize, cols: usize, cell_km: T) -> Result<Self, MobilityError> {
        if rows == 0 || cols == 0 || !(cell_km > T::zero()) || !cell_km.is_finite() {
            return Err(invalid("grid", format!("{rows}x{cols} cells of {cell_km} km")));
        }
        Ok(Self { origin: Point::new(T::zero(), T::zero()), cell_km, rows, cols })
    }

    pub fn num_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width_km(&self) -> T {
        self.cell_km * T::from_usize_lossy(self.cols)
    }

    pub fn height_km(&self) -> T {
        self.cell_km * T::from_usize_lossy(self.rows)
    }

    pub fn diagonal_km(&self) -> T {
        self.width_km().hypot(self.height_km())
    }

    pub fn centre(&self) -> Point<T> {
        let half = T::lit(0.5);
        Point::new(self.origin.x + half * self.width_km(), self.origin.y + half * self.height_km())
    }

    pub fn contains(&self, p: &Point<T>) -> bool {
        let (dx, dy) = (p.x - self.origin.x, p.y - self.origin.y);
        dx >= T::zero() && dy >= T::zero() && dx <= self.width_km() && dy <= self.height_km()
    }

    /// Cell index of `p`, cells being closed on their upper edges at the border.
    pub fn cell_of(&self, p: &Point<T>) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let col = ((p.x - self.origin.x) / self.cell_km).floor().to_usize()?.min(self.cols - 1);
        let row = ((p.y - self.origin.y) / self.cell_km).floor().to_usize()?.min(self.rows - 1);
        Some(row * self.cols + col)
    }

    pub fn node_locations(&self) -> Vec<Point<T>> {
        let half = T::lit(0.5);
        (0..self.num_nodes())
            .map(|id| {
                let (r, c) = (id / self.cols, id % self.cols);
                Point::new(
                    self.origin.x + (T::from_usize_lossy(c) + half) * self.cell_km,
                    self.origin.y + (T::from_usize_lossy(r) + half) * self.cell_km,
                )
            })
            .collect()
    }

    /// Healthy edge nodes at the cell centres, all with the same budget.
    pub fn edge_nodes(&self, capacity: T) -> Result<Vec<EdgeNode<T>>, ModelError> {
        self.node_locations().into_iter().enumerate().map(|(id, loc)| EdgeNode::new(id, loc, capacity)).collect()
    }
}

/// Geographic bounding box, degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoBBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, MobilityError> {
        let finite = [min_lat, min_lon, max_lat, max_lon].iter().all(|v| v.is_finite());
        if !finite || min_lat >= max_lat || min_lon >= max_lon || min_lat < -90.0 || max_lat > 90.0 {
            return Err(invalid("bbox", format!("({min_lat},{min_lon})-({max_lat},{max_lon})")));
        }
        Ok(Self { min_lat, min_lon, max_lat, max_lon })
    }

    /// Box of the given size in km whose south-west corner is `(lat, lon)`.
    pub fn from_corner(lat: f64, lon: f64, width_km: f64, height_km: f64) -> Result<Self, MobilityError> {
        let max_lat = lat + height_km / KM_PER_DEG_LAT;
        // mid-latitude scale, matching `project`
        let kx = KM_PER_DEG_LON_EQ * ((lat + max_lat) / 2.0).to_radians().cos();
        Self::new(lat, lon, max_lat, lon + width_km / kx)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }

    fn lon_scale(&self) -> f64 {
        KM_PER_DEG_LON_EQ * ((self.min_lat + self.max_lat) / 2.0).to_radians().cos()
    }

    /// Equirectangular projection, km east/north of the south-west corner.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        ((lon - self.min_lon) * self.lon_scale(), (lat - self.min_lat) * KM_PER_DEG_LAT)
    }

    pub fn unproject(&self, x_km: f64, y_km: f64) -> (f64, f64) {
        (self.min_lat + y_km / KM_PER_DEG_LAT, self.min_lon + x_km / self.lon_scale())
    }
}

/// Requests bucketed by time unit, `units[t]` sorted by vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestStream<T> {
    units: Vec<Vec<ServiceRequest<T>>>,
    services: usize,
}

impl<T: Scalar> RequestStream<T> {
    pub fn new(units: Vec<Vec<ServiceRequest<T>>>, services: usize) -> Result<Self, MobilityError> {
        for (t, reqs) in units.iter().enumerate() {
            if let Some(r) = reqs.iter().find(|r| r.service >= services || r.time != t as u64) {
                return Err(invalid("request", format!("{r:?} in unit {t} with {services} services")));
            }
        }
        Ok(Self { units, services })
    }

    pub fn horizon(&self) -> usize {
        self.units.len()
    }

    pub fn num_services(&self) -> usize {
        self.services
    }

    /// Requests issued at `t`; empty past the horizon.
    pub fn at(&self, t: usize) -> &[ServiceRequest<T>] {
        self.units.get(t).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn demand(&self, t: usize) -> Vec<T> {
        derive_demand(self.at(t), self.services)
    }

    pub fn total_requests(&self) -> usize {
        self.units.iter().map(Vec::len).sum()
    }

    pub fn truncate(&mut self, horizon: usize) {
        self.units.truncate(horizon);
    }
}

/// Options for [`ingest_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub time_unit_s: f64,
    /// Units a silent vehicle is carried at its last position before it departs.
    pub max_gap_units: u64,
    pub services: usize,
    /// Chance that a present vehicle issues a request in a unit.
    pub request_prob: f64,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { time_unit_s: 60.0, max_gap_units: 5, services: 8, request_prob: 1.0, seed: 0 }
    }
}

impl IngestOptions {
    fn validate(&self) -> Result<(), MobilityError> {
        if !(self.time_unit_s > 0.0) || !self.time_unit_s.is_finite() {
            return Err(invalid("time unit", self.time_unit_s.to_string()));
        }
        if self.services == 0 {
            return Err(invalid("service count", "0"));
        }
        if !(0.0..=1.0).contains(&self.request_prob) {
            return Err(invalid("request probability", self.request_prob.to_string()));
        }
        Ok(())
    }
}

/// Row accounting from [`ingest_trace`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub malformed: usize,
    /// Rows outside the bbox or the grid.
    pub dropped: usize,
    pub used: usize,
    pub vehicles: usize,
    pub horizon: usize,
}

fn parse_row(rec: &csv::StringRecord, cols: [usize; 4]) -> Option<TracePoint> {
    if rec.len() != 4 {
        return None;
    }
    let field = |i: usize| rec.get(cols[i]).map(str::trim);
    let vehicle_id = field(0)?.to_string();
    let num = |i: usize| field(i)?.parse::<f64>().ok().filter(|v| v.is_finite());
    let (timestamp, lat, lon) = (num(1)?, num(2)?, num(3)?);
    if vehicle_id.is_empty() {
        return None;
    }
    Some(TracePoint { vehicle_id, timestamp, lat, lon })
}

/// Reads every row of a trace file. Malformed rows, and rows whose timestamp
/// runs backwards for their vehicle, are skipped and counted.
pub fn read_trace(path: &Path) -> Result<(Vec<TracePoint>, usize), MobilityError> {
    let io = |e: csv::Error| MobilityError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(io)?;
    let header: Vec<String> = reader.headers().map_err(io)?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let cols = match (find("vehicle_id"), find("timestamp"), find("lat"), find("lon")) {
        (Some(a), Some(b), Some(c), Some(d)) if header.len() == 4 => [a, b, c, d],
        _ => return Err(MobilityError::Header(header)),
    };
    let mut points = Vec::new();
    let mut malformed = 0;
    let mut last_seen: HashMap<String, f64> = HashMap::new();
    for rec in reader.records() {
        let Some(p) = rec.ok().as_ref().and_then(|r| parse_row(r, cols)) else {
            malformed += 1;
            continue;
        };
        match last_seen.get(&p.vehicle_id) {
            Some(&prev) if p.timestamp < prev => {
                malformed += 1;
                continue;
            }
            _ => {}
        }
        last_seen.insert(p.vehicle_id.clone(), p.timestamp);
        points.push(p);
    }
    Ok((points, malformed))
}

/// Mean position of a trace, used to centre a default bbox.
pub fn trace_centroid(points: &[TracePoint]) -> Option<(f64, f64)> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    Some((points.iter().map(|p| p.lat).sum::<f64>() / n, points.iter().map(|p| p.lon).sum::<f64>() / n))
}

/// Loads a trace CSV and turns it into per-unit requests.
///
/// Points are projected relative to the bbox's south-west corner. Time unit 0
/// starts at the earliest usable timestamp. Vehicle ids are numbered by first
/// appearance.
pub fn ingest_trace<T: Scalar>(
    path: &Path,
    bbox: &GeoBBox,
    grid: &GridMap<T>,
    opts: &IngestOptions,
) -> Result<(RequestStream<T>, IngestReport), MobilityError> {
    opts.validate()?;
    let (points, malformed) = read_trace(path)?;
    let mut report = IngestReport { rows: points.len() + malformed, malformed, ..Default::default() };
    let stream = bin_points(&points, bbox, grid, opts, &mut report)?;
    Ok((stream, report))
}

/// Binning half of [`ingest_trace`], for traces already in memory.
pub fn bin_points<T: Scalar>(
    points: &[TracePoint],
    bbox: &GeoBBox,
    grid: &GridMap<T>,
    opts: &IngestOptions,
    report: &mut IngestReport,
) -> Result<RequestStream<T>, MobilityError> {
    opts.validate()?;
    let mut kept: Vec<(usize, f64, Point<T>)> = Vec::with_capacity(points.len());
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for p in points {
        let (x, y) = bbox.project(p.lat, p.lon);
        let loc = Point::new(T::lit(x), T::lit(y));
        if !bbox.contains(p.lat, p.lon) || !grid.contains(&loc) {
            report.dropped += 1;
            continue;
        }
        let next = ids.len();
        let v = *ids.entry(p.vehicle_id.as_str()).or_insert(next);
        kept.push((v, p.timestamp, loc));
    }
    if kept.is_empty() {
        return Err(MobilityError::NoUsableRows { malformed: report.malformed, dropped: report.dropped });
    }
    report.used = kept.len();
    report.vehicles = ids.len();

    let t0 = kept.iter().map(|k| k.1).fold(f64::INFINITY, f64::min);
    let unit_of = |ts: f64| ((ts - t0) / opts.time_unit_s).floor() as usize;
    let horizon = kept.iter().map(|k| unit_of(k.1)).max().unwrap_or(0) + 1;
    report.horizon = horizon;

    // last position per vehicle per unit; rows are per-vehicle non-decreasing
    let mut seen: Vec<Vec<(usize, Point<T>)>> = vec![Vec::new(); ids.len()];
    for (v, ts, loc) in kept {
        let t = unit_of(ts);
        match seen[v].last_mut() {
            Some(last) if last.0 == t => last.1 = loc,
            _ => seen[v].push((t, loc)),
        }
    }

    let mut present: Vec<Vec<(u32, Point<T>)>> = vec![Vec::new(); horizon];
    for (v, track) in seen.iter().enumerate() {
        for (i, &(t, loc)) in track.iter().enumerate() {
            let next = track.get(i + 1).map(|n| n.0).unwrap_or(horizon);
            let until = next.min(t.saturating_add(opts.max_gap_units as usize + 1)).min(horizon);
            for slot in present.iter_mut().take(until).skip(t) {
                slot.push((v as u32, loc));
            }
        }
    }
    Ok(assign_services(present, opts.services, opts.request_prob, opts.seed))
}

/// Every present vehicle requests with probability `p`, the service drawn
/// uniformly. Draws run in (unit, vehicle) order from one seeded stream.
fn assign_services<T: Scalar>(present: Vec<Vec<(u32, Point<T>)>>, services: usize, p: f64, seed: u64) -> RequestStream<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = present
        .into_iter()
        .enumerate()
        .map(|(t, mut vs)| {
            vs.sort_by_key(|v| v.0);
            vs.into_iter()
                .filter_map(|(vehicle, location)| {
                    let asks = p >= 1.0 || rng.gen_bool(p);
                    let service = rng.gen_range(0..services);
                    asks.then_some(ServiceRequest { vehicle, location, time: t as u64, service })
                })
                .collect()
        })
        .collect();
    RequestStream { units, services }
}

/// Random-waypoint parameters. Speeds are in km/h.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaypointModel {
    pub v_min_kmh: f64,
    pub v_max_kmh: f64,
    pub time_unit_s: f64,
    pub request_prob: f64,
    pub services: usize,
}

impl Default for WaypointModel {
    fn default() -> Self {
        Self { v_min_kmh: 20.0, v_max_kmh: 60.0, time_unit_s: 60.0, request_prob: 1.0, services: 8 }
    }
}

impl WaypointModel {
    fn validate(&self) -> Result<(), MobilityError> {
        let speeds_ok = self.v_min_kmh > 0.0 && self.v_min_kmh <= self.v_max_kmh && self.v_max_kmh.is_finite();
        if !speeds_ok {
            return Err(invalid("speed range", format!("[{}, {}] km/h", self.v_min_kmh, self.v_max_kmh)));
        }
        IngestOptions {
            time_unit_s: self.time_unit_s,
            max_gap_units: 0,
            services: self.services,
            request_prob: self.request_prob,
            seed: 0,
        }
        .validate()
    }
}

/// Positions of every vehicle at every unit under the waypoint model.
/// `result[t][v]` is vehicle `v` at unit `t`.
pub fn synthetic_trajectories<T: Scalar>(
    seed: u64,
    vehicles: usize,
    grid: &GridMap<T>,
    horizon: usize,
    model: &WaypointModel,
) -> Result<Vec<Vec<Point<T>>>, MobilityError> {
    if vehicles == 0 || horizon == 0 {
        return Err(invalid("synthetic size", format!("{vehicles} vehicles over {horizon} units")));
    }
    model.validate()?;
    let (w, h) = (grid.width_km().as_f64(), grid.height_km().as_f64());
    let (ox, oy) = (grid.origin.x.as_f64(), grid.origin.y.as_f64());
    // separate stream from request draws so mobility is independent of p_request
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6269_6c69_7479);
    let hours = model.time_unit_s / 3600.0;
    let draw_point = |rng: &mut ChaCha8Rng| (rng.gen_range(0.0..=w), rng.gen_range(0.0..=h));

    struct Walker {
        pos: (f64, f64),
        goal: (f64, f64),
        speed: f64,
    }
    let mut walkers: Vec<Walker> = (0..vehicles)
        .map(|_| {
            let pos = draw_point(&mut rng);
            let goal = draw_point(&mut rng);
            let speed = rng.gen_range(model.v_min_kmh..=model.v_max_kmh);
            Walker { pos, goal, speed }
        })
        .collect();

    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        if t > 0 {
            for wk in walkers.iter_mut() {
                let mut budget = wk.speed * hours;
                // a leg may end mid-unit; the rest of the unit continues on a fresh leg
                while budget > 0.0 {
                    let (dx, dy) = (wk.goal.0 - wk.pos.0, wk.goal.1 - wk.pos.1);
                    let dist = dx.hypot(dy);
                    if dist > budget {
                        wk.pos = (wk.pos.0 + dx * budget / dist, wk.pos.1 + dy * budget / dist);
                        break;
                    }
                    wk.pos = wk.goal;
                    budget -= dist;
                    wk.goal = draw_point(&mut rng);
                    wk.speed = rng.gen_range(model.v_min_kmh..=model.v_max_kmh);
                    budget = budget.min(wk.speed * hours);
                }
            }
        }
        out.push(
            walkers
                .iter()
                .map(|wk| Point::new(T::lit((ox + wk.pos.0).clamp(ox, ox + w)), T::lit((oy + wk.pos.1).clamp(oy, oy + h))))
                .collect(),
        );
    }
    Ok(out)
}

/// Synthetic request stream: waypoint mobility, then the same request draw as
/// ingested traces.
pub fn generate_synthetic<T: Scalar>(
    seed: u64,
    vehicles: usize,
    grid: &GridMap<T>,
    horizon: usize,
    model: &WaypointModel,
) -> Result<RequestStream<T>, MobilityError> {
    let tracks = synthetic_trajectories(seed, vehicles, grid, horizon, model)?;
    let present = tracks
        .into_iter()
        .map(|row| row.into_iter().enumerate().map(|(v, p)| (v as u32, p)).collect())
        .collect();
    Ok(assign_services(present, model.services, model.request_prob, seed))
}

/// Writes trajectories as a trace CSV inside `bbox`, one point per vehicle per
/// unit starting at `t0`.
pub fn write_trace_csv<T: Scalar>(
    path: &Path,
    tracks: &[Vec<Point<T>>],
    bbox: &GeoBBox,
    t0: f64,
    time_unit_s: f64,
) -> Result<(), MobilityError> {
    let io = |e: csv::Error| MobilityError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["vehicle_id", "timestamp", "lat", "lon"]).map_err(io)?;
    for (t, row) in tracks.iter().enumerate() {
        for (v, p) in row.iter().enumerate() {
            let (lat, lon) = bbox.unproject(p.x.as_f64(), p.y.as_f64());
            let ts = t0 + t as f64 * time_unit_s;
            w.write_record([format!("veh{v}"), format!("{ts}"), format!("{lat:.9}"), format!("{lon:.9}")])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| MobilityError::Io { path: path.display().to_string(), source: e })
}

/// Request count per service.
pub fn derive_demand<T: Scalar>(requests: &[ServiceRequest<T>], services: usize) -> Vec<T> {
    let mut counts = vec![0usize; services];
    for r in requests {
        counts[r.service] += 1;
    }
    counts.into_iter().map(T::from_usize_lossy).collect()
}

/// Affine propagation model, `alpha * km + base` in ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationModel<T> {
    pub alpha_ms_per_km: T,
    pub base_ms: T,
}

impl<T: Scalar> Default for PropagationModel<T> {
    fn default() -> Self {
        Self { alpha_ms_per_km: T::lit(2.0), base_ms: T::one() }
    }
}

impl<T: Scalar> PropagationModel<T> {
    pub fn new(alpha_ms_per_km: T, base_ms: T) -> Result<Self, MobilityError> {
        let ok = |v: T| v >= T::zero() && v.is_finite();
        if !ok(alpha_ms_per_km) || !ok(base_ms) {
            return Err(invalid("propagation model", format!("alpha {alpha_ms_per_km}, base {base_ms}")));
        }
        Ok(Self { alpha_ms_per_km, base_ms })
    }

    pub fn delay(&self, km: T) -> T {
        self.alpha_ms_per_km * km + self.base_ms
    }
}

/// `d[e][s]`: mean distance from node `e` to the vehicles requesting `s`,
/// through the propagation model. Services nobody requests use every
/// requesting vehicle; with no requests at all, `fallback` stands in.
pub fn derive_delay_matrix<T: Scalar>(
    requests: &[ServiceRequest<T>],
    nodes: &[EdgeNode<T>],
    services: usize,
    prop: &PropagationModel<T>,
    fallback: Point<T>,
) -> Result<DelayModel<T>, MobilityError> {
    let mut by_service: Vec<Vec<Point<T>>> = vec![Vec::new(); services];
    for r in requests {
        by_service[r.service].push(r.location);
    }
    let everyone: Vec<Point<T>> = requests.iter().map(|r| r.location).collect();
    let mean_dist = |pts: &[Point<T>], at: &Point<T>| {
        if pts.is_empty() {
            at.distance(&fallback)
        } else {
            compensated_sum(pts.iter().map(|p| p.distance(at))) / T::from_usize_lossy(pts.len())
        }
    };
    let d = nodes
        .iter()
        .map(|n| {
            (0..services)
                .map(|s| {
                    let pts = if by_service[s].is_empty() { &everyone } else { &by_service[s] };
                    prop.delay(mean_dist(pts, &n.location))
                })
                .collect()
        })
        .collect();
    Ok(DelayModel::new(d)?)
}
