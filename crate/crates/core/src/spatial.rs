//! Planar geometry for service areas.
//!
//! Inputs arrive in WGS84 degrees and are projected onto a local plane
//! (azimuthal equidistant about the input centroid) before any area or
//! distance is computed. Station service areas are the Voronoi cells of
//! the station points, built per station as the intersection of the
//! bounding region with the half-planes closer to that station than to
//! every other one.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FeatureTable, StationSet};
use crate::scalar::Scalar;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
/// Largest extent accepted by [`LocalProjection`].
pub const MAX_EXTENT_KM: f64 = 500.0;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("input extent {span_km:.1} km exceeds {MAX_EXTENT_KM} km")]
    ExtentTooLarge { span_km: f64 },
    #[error("no points to project")]
    EmptyInput,
    #[error("stations `{0}` and `{1}` project to the same point")]
    DuplicateStationPoints(String, String),
    #[error("at least one station is required")]
    NoStations,
    #[error("bounding region is degenerate")]
    DegenerateBoundary,
    #[error("neighborhood `{0}` has zero area inside the bounding region")]
    ZeroAreaNeighborhood(String),
    #[error("region mismatch: {0}")]
    RegionMismatch(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, o: &Point<T>) -> T {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        dx * dx + dy * dy
    }
}

/// Where a point sits relative to a closed area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside,
    Boundary,
    Outside,
}

/// Ring stored open (no repeated closing vertex).
pub type Ring<T> = Vec<Point<T>>;

pub fn ring_signed_area<T: Scalar>(ring: &[Point<T>]) -> T {
    let n = ring.len();
    if n < 3 {
        return T::zero();
    }
    // shoelace about the first vertex for precision
    let o = ring[0];
    let mut s = T::zero();
    for i in 1..n - 1 {
        let a = ring[i];
        let b = ring[i + 1];
        s += (a.x - o.x) * (b.y - o.y) - (b.x - o.x) * (a.y - o.y);
    }
    s / T::lit(2.0)
}

fn on_segment<T: Scalar>(a: &Point<T>, b: &Point<T>, p: &Point<T>) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    cross == T::zero()
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

pub fn ring_location<T: Scalar>(ring: &[Point<T>], p: &Point<T>) -> Location {
    let n = ring.len();
    let mut inside = false;
    for i in 0..n {
        let a = &ring[if i == 0 { n - 1 } else { i - 1 }];
        let b = &ring[i];
        if on_segment(a, b, p) {
            return Location::Boundary;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<T> {
    pub min: Point<T>,
    pub max: Point<T>,
}

impl<T: Scalar> Bounds<T> {
    fn of<'a, I: IntoIterator<Item = &'a Point<T>>>(pts: I) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = *it.next()?;
        let mut b = Bounds {
            min: first,
            max: first,
        };
        for p in it {
            b.min.x = b.min.x.min(p.x);
            b.min.y = b.min.y.min(p.y);
            b.max.x = b.max.x.max(p.x);
            b.max.y = b.max.y.max(p.y);
        }
        Some(b)
    }

    pub fn intersects(&self, o: &Bounds<T>) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }

    pub fn contains(&self, p: &Point<T>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

/// Polygon with an exterior ring (counter-clockwise) and holes (clockwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon<T> {
    pub exterior: Ring<T>,
    pub holes: Vec<Ring<T>>,
}

fn orient<T: Scalar>(mut ring: Ring<T>, ccw: bool) -> Ring<T> {
    if (ring_signed_area(&ring) > T::zero()) != ccw {
        ring.reverse();
    }
    ring
}

fn open_ring<T: Scalar>(mut ring: Ring<T>) -> Ring<T> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

impl<T: Scalar> Polygon<T> {
    /// Builds from open or closed rings, normalising orientation.
    pub fn new(exterior: Ring<T>, holes: Vec<Ring<T>>) -> Self {
        Self {
            exterior: orient(open_ring(exterior), true),
            holes: holes
                .into_iter()
                .map(|h| orient(open_ring(h), false))
                .collect(),
        }
    }

    pub fn from_closed_rings(exterior: Ring<T>, holes: Vec<Ring<T>>) -> Self {
        Self::new(exterior, holes)
    }

    /// Axis-aligned rectangle.
    pub fn rect(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self::new(
            vec![
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
            ],
            Vec::new(),
        )
    }

    pub fn area(&self) -> T {
        let mut a = ring_signed_area(&self.exterior).abs();
        for h in &self.holes {
            a -= ring_signed_area(h).abs();
        }
        a
    }

    pub fn bounds(&self) -> Option<Bounds<T>> {
        Bounds::of(self.exterior.iter())
    }

    pub fn locate(&self, p: &Point<T>) -> Location {
        match ring_location(&self.exterior, p) {
            Location::Inside => {}
            other => return other,
        }
        for h in &self.holes {
            match ring_location(h, p) {
                Location::Inside => return Location::Outside,
                Location::Boundary => return Location::Boundary,
                Location::Outside => {}
            }
        }
        Location::Inside
    }

    /// Area-weighted centroid of the exterior ring.
    pub fn centroid(&self) -> Point<T> {
        let ring = &self.exterior;
        let o = ring[0];
        let (mut cx, mut cy, mut a2) = (T::zero(), T::zero(), T::zero());
        for i in 0..ring.len() {
            let p = ring[i];
            let q = ring[(i + 1) % ring.len()];
            let (px, py, qx, qy) = (p.x - o.x, p.y - o.y, q.x - o.x, q.y - o.y);
            let c = px * qy - qx * py;
            a2 += c;
            cx += (px + qx) * c;
            cy += (py + qy) * c;
        }
        let six = T::lit(3.0) * a2;
        Point::new(o.x + cx / six, o.y + cy / six)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(Point<T>) -> Point<U>) -> Polygon<U> {
        Polygon {
            exterior: self.exterior.iter().map(|p| f(*p)).collect(),
            holes: self
                .holes
                .iter()
                .map(|h| h.iter().map(|p| f(*p)).collect())
                .collect(),
        }
    }

    /// Clips to the half-plane `d · (p − m) ≤ 0`.
    pub fn clip_halfplane(&self, d: Point<T>, m: Point<T>) -> Option<Polygon<T>> {
        let exterior = clip_ring(&self.exterior, d, m)?;
        let holes = self
            .holes
            .iter()
            .filter_map(|h| clip_ring(h, d, m))
            .collect();
        Some(Polygon { exterior, holes })
    }

    fn validate(&self) -> Result<(), String> {
        for ring in std::iter::once(&self.exterior).chain(self.holes.iter()) {
            if ring.len() < 3 {
                return Err("ring has fewer than 3 distinct vertices".into());
            }
            if ring_self_intersects(ring) {
                return Err("ring self-intersects".into());
            }
        }
        if !(self.area() > T::zero()) {
            return Err("polygon has non-positive area".into());
        }
        Ok(())
    }
}

fn clip_ring<T: Scalar>(ring: &[Point<T>], d: Point<T>, m: Point<T>) -> Option<Ring<T>> {
    let f = |p: &Point<T>| d.x * (p.x - m.x) + d.y * (p.y - m.y);
    let n = ring.len();
    let mut out: Ring<T> = Vec::with_capacity(n + 4);
    let push = |p: Point<T>, out: &mut Ring<T>| {
        if out.last() != Some(&p) {
            out.push(p);
        }
    };
    for i in 0..n {
        let prev = ring[if i == 0 { n - 1 } else { i - 1 }];
        let cur = ring[i];
        let (fp, fc) = (f(&prev), f(&cur));
        if fc <= T::zero() {
            if fp > T::zero() {
                push(intersect(prev, cur, fp, fc), &mut out);
            }
            push(cur, &mut out);
        } else if fp <= T::zero() {
            push(intersect(prev, cur, fp, fc), &mut out);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    (out.len() >= 3 && ring_signed_area(&out) != T::zero()).then_some(out)
}

fn intersect<T: Scalar>(a: Point<T>, b: Point<T>, fa: T, fb: T) -> Point<T> {
    let t = fa / (fa - fb);
    Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
}

fn segments_intersect<T: Scalar>(p1: &Point<T>, p2: &Point<T>, q1: &Point<T>, q2: &Point<T>) -> bool {
    let orient = |a: &Point<T>, b: &Point<T>, c: &Point<T>| {
        let v = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        v.partial_cmp(&T::zero()).unwrap_or(Ordering::Equal)
    };
    let (o1, o2, o3, o4) = (
        orient(p1, p2, q1),
        orient(p1, p2, q2),
        orient(q1, q2, p1),
        orient(q1, q2, p2),
    );
    if o1 != o2 && o3 != o4 && o1 != Ordering::Equal && o2 != Ordering::Equal
        && o3 != Ordering::Equal && o4 != Ordering::Equal
    {
        return true;
    }
    (o1 == Ordering::Equal && on_segment(p1, p2, q1))
        || (o2 == Ordering::Equal && on_segment(p1, p2, q2))
        || (o3 == Ordering::Equal && on_segment(q1, q2, p1))
        || (o4 == Ordering::Equal && on_segment(q1, q2, p2))
}

fn ring_self_intersects<T: Scalar>(ring: &[Point<T>]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a1, a2) = (&ring[i], &ring[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (&ring[j], &ring[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

/// A named (multi)polygon: a neighborhood or any other areal unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region<T> {
    pub region_id: String,
    pub polygons: Vec<Polygon<T>>,
}

impl<T: Scalar> Region<T> {
    /// Validates ring simplicity and positive area.
    pub fn new(region_id: String, polygons: Vec<Polygon<T>>) -> Result<Self, SpatialError> {
        if polygons.is_empty() {
            return Err(SpatialError::InvalidPolygon(format!("`{region_id}` has no polygons")));
        }
        for p in &polygons {
            p.validate()
                .map_err(|e| SpatialError::InvalidPolygon(format!("`{region_id}`: {e}")))?;
        }
        Ok(Self { region_id, polygons })
    }

    pub fn area(&self) -> T {
        self.polygons.iter().map(Polygon::area).sum()
    }

    pub fn bounds(&self) -> Option<Bounds<T>> {
        Bounds::of(self.polygons.iter().flat_map(|p| p.exterior.iter()))
    }

    pub fn locate(&self, p: &Point<T>) -> Location {
        let mut best = Location::Outside;
        for poly in &self.polygons {
            match poly.locate(p) {
                Location::Inside => return Location::Inside,
                Location::Boundary => best = Location::Boundary,
                Location::Outside => {}
            }
        }
        best
    }

    /// Centroid of the largest member polygon.
    pub fn centroid(&self) -> Point<T> {
        self.polygons
            .iter()
            .max_by(|a, b| a.area().partial_cmp(&b.area()).unwrap_or(Ordering::Equal))
            .map(Polygon::centroid)
            .expect("region has polygons")
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(Point<T>) -> Point<U> + Copy) -> Region<U> {
        Region {
            region_id: self.region_id.clone(),
            polygons: self.polygons.iter().map(|p| p.map(f)).collect(),
        }
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Point<T>> {
        self.polygons
            .iter()
            .flat_map(|p| p.exterior.iter().chain(p.holes.iter().flatten()))
    }
}

/// Great-circle distance in metres between two lon/lat points (degrees).
pub fn haversine_m<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    let r = T::lit(EARTH_RADIUS_M);
    let (la1, la2) = (a.y.to_radians(), b.y.to_radians());
    let dla = la2 - la1;
    let dlo = (b.x - a.x).to_radians();
    let two = T::lit(2.0);
    let h = (dla / two).sin().powi(2) + la1.cos() * la2.cos() * (dlo / two).sin().powi(2);
    two * r * h.sqrt().min(T::one()).asin()
}

/// Azimuthal equidistant projection about a fixed origin (spherical Earth).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection<T> {
    pub origin: Point<T>,
}

impl<T: Scalar> LocalProjection<T> {
    /// Centres the projection on the mean lon/lat of `points`.
    pub fn fit(points: &[Point<T>]) -> Result<Self, SpatialError> {
        let b = Bounds::of(points.iter()).ok_or(SpatialError::EmptyInput)?;
        let span = haversine_m(b.min, b.max).to_f64_lossy() / 1000.0;
        let lon_span = (b.max.x - b.min.x).to_f64_lossy();
        if span > MAX_EXTENT_KM || lon_span > 180.0 {
            return Err(SpatialError::ExtentTooLarge { span_km: span });
        }
        let n = T::from_usize_lossy(points.len());
        let origin = Point::new(
            points.iter().map(|p| p.x).sum::<T>() / n,
            points.iter().map(|p| p.y).sum::<T>() / n,
        );
        Ok(Self { origin })
    }

    /// lon/lat degrees → metres east/north of the origin.
    pub fn forward(&self, p: Point<T>) -> Point<T> {
        let r = T::lit(EARTH_RADIUS_M);
        let (phi0, phi) = (self.origin.y.to_radians(), p.y.to_radians());
        let dl = (p.x - self.origin.x).to_radians();
        let two = T::lit(2.0);
        let h = ((phi - phi0) / two).sin().powi(2) + phi.cos() * phi0.cos() * (dl / two).sin().powi(2);
        let c = two * h.sqrt().min(T::one()).asin();
        let k = if c == T::zero() { T::one() } else { c / c.sin() };
        Point::new(
            r * k * phi.cos() * dl.sin(),
            r * k * (phi0.cos() * phi.sin() - phi0.sin() * phi.cos() * dl.cos()),
        )
    }

    /// Metres → lon/lat degrees.
    pub fn inverse(&self, p: Point<T>) -> Point<T> {
        let r = T::lit(EARTH_RADIUS_M);
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        if rho == T::zero() {
            return self.origin;
        }
        let c = rho / r;
        let phi0 = self.origin.y.to_radians();
        let phi = (c.cos() * phi0.sin() + p.y * c.sin() * phi0.cos() / rho)
            .max(-T::one())
            .min(T::one())
            .asin();
        let lam = (p.x * c.sin()).atan2(rho * phi0.cos() * c.cos() - p.y * phi0.sin() * c.sin());
        Point::new(self.origin.x + lam.to_degrees(), phi.to_degrees())
    }
}

/// Projects every input point, failing on extents over [`MAX_EXTENT_KM`].
pub fn project_to_plane<T: Scalar>(
    points: &[Point<T>],
) -> Result<(LocalProjection<T>, Vec<Point<T>>), SpatialError> {
    let proj = LocalProjection::fit(points)?;
    let out = points.iter().map(|p| proj.forward(*p)).collect();
    Ok((proj, out))
}

/// Nearest-station partition of a bounding region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiPartition<T> {
    pub station_ids: Vec<String>,
    pub sites: Vec<Point<T>>,
    /// One cell per station; `None` when the station's cell misses the bounding region.
    pub cells: Vec<Option<Polygon<T>>>,
    pub bounding: Polygon<T>,
}

impl<T: Scalar> VoronoiPartition<T> {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Index of the nearest site; ties go to the lowest index.
    pub fn nearest(&self, p: &Point<T>) -> usize {
        let mut best = 0;
        let mut bd = self.sites[0].dist2(p);
        for (i, s) in self.sites.iter().enumerate().skip(1) {
            let d = s.dist2(p);
            if d < bd {
                best = i;
                bd = d;
            }
        }
        best
    }

    /// Station whose cell contains `p`, or `None` outside the bounding region.
    pub fn locate(&self, p: &Point<T>) -> Option<usize> {
        (self.bounding.locate(p) != Location::Outside).then(|| self.nearest(p))
    }

    pub fn cell_area(&self, k: usize) -> T {
        self.cells[k].as_ref().map_or(T::zero(), Polygon::area)
    }

    /// Clips `poly` to station `k`'s half-plane cone (not to the bounding region).
    fn clip_to_site(&self, poly: &Polygon<T>, k: usize) -> Option<Polygon<T>> {
        let pk = self.sites[k];
        let mut cur = poly.clone();
        for (j, pj) in self.sites.iter().enumerate() {
            if j == k {
                continue;
            }
            let d = Point::new(pj.x - pk.x, pj.y - pk.y);
            let two = T::lit(2.0);
            let m = Point::new((pk.x + pj.x) / two, (pk.y + pj.y) / two);
            cur = cur.clip_halfplane(d, m)?;
        }
        Some(cur)
    }
}

/// Builds the Voronoi partition of planar `sites` clipped to `bounding`.
pub fn voronoi<T: Scalar>(
    station_ids: &[String],
    sites: &[Point<T>],
    bounding: &Polygon<T>,
) -> Result<VoronoiPartition<T>, SpatialError> {
    assert_eq!(station_ids.len(), sites.len());
    if sites.is_empty() {
        return Err(SpatialError::NoStations);
    }
    if bounding.exterior.len() < 3 || !(bounding.area() > T::zero()) {
        return Err(SpatialError::DegenerateBoundary);
    }
    for i in 0..sites.len() {
        for j in (i + 1)..sites.len() {
            if sites[i] == sites[j] {
                return Err(SpatialError::DuplicateStationPoints(
                    station_ids[i].clone(),
                    station_ids[j].clone(),
                ));
            }
        }
        if bounding.locate(&sites[i]) == Location::Outside {
            log::warn!("station `{}` lies outside the bounding region", station_ids[i]);
        }
    }
    let mut part = VoronoiPartition {
        station_ids: station_ids.to_vec(),
        sites: sites.to_vec(),
        cells: Vec::new(),
        bounding: bounding.clone(),
    };
    part.cells = (0..sites.len())
        .into_par_iter()
        .map(|k| part.clip_to_site(bounding, k))
        .collect();
    Ok(part)
}

/// Projects stations, builds the partition in the plane.
pub fn voronoi_for_stations(
    stations: &StationSet,
    bounding_lonlat: &Polygon<f64>,
    projection: &LocalProjection<f64>,
) -> Result<VoronoiPartition<f64>, SpatialError> {
    let sites: Vec<Point<f64>> = stations
        .stations
        .iter()
        .map(|s| projection.forward(Point::new(s.lon, s.lat)))
        .collect();
    let bounding = bounding_lonlat.map(|p| projection.forward(p));
    voronoi(&stations.ids(), &sites, &bounding)
}

/// Fraction of each neighborhood's area falling in each station cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix<T> {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major `rows.len() × cols.len()`.
    pub weights: Vec<T>,
}

impl<T: Scalar> OverlapMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.weights[i * self.cols.len() + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let m = self.cols.len();
        &self.weights[i * m..(i + 1) * m]
    }

    /// Column with the largest weight in row `i`; ties go to the lowest index.
    pub fn dominant(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, w) in row.iter().enumerate() {
            if *w > row[best] {
                best = j;
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["region_id".to_string()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![r.clone()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn clip_region_to_bounding<T: Scalar>(region: &Region<T>, bounding: &Polygon<T>) -> Vec<Polygon<T>> {
    use geo::BooleanOps;
    let to_geo = |p: &Polygon<T>| {
        let ring = |r: &Ring<T>| {
            geo::LineString::from(
                r.iter()
                    .map(|q| (q.x.to_f64_lossy(), q.y.to_f64_lossy()))
                    .collect::<Vec<_>>(),
            )
        };
        geo::Polygon::new(ring(&p.exterior), p.holes.iter().map(ring).collect())
    };
    let b = geo::MultiPolygon::new(vec![to_geo(bounding)]);
    let r = geo::MultiPolygon::new(region.polygons.iter().map(to_geo).collect());
    let clipped = r.intersection(&b);
    let back = |ls: &geo::LineString<f64>| -> Ring<T> {
        ls.coords()
            .map(|c| Point::new(T::lit(c.x), T::lit(c.y)))
            .collect()
    };
    clipped
        .0
        .iter()
        .map(|p| Polygon::new(back(p.exterior()), p.interiors().iter().map(back).collect()))
        .collect()
}

/// `w[i][j] = area(N_i ∩ C_j) / area(N_i)`, with neighborhoods clipped to the
/// bounding region first when they stick out of it.
pub fn overlap_matrix<T: Scalar>(
    neighborhoods: &[Region<T>],
    partition: &VoronoiPartition<T>,
) -> Result<OverlapMatrix<T>, SpatialError> {
    let cell_bounds: Vec<Option<Bounds<T>>> = partition
        .cells
        .iter()
        .map(|c| c.as_ref().and_then(Polygon::bounds))
        .collect();
    let rows: Vec<Vec<T>> = neighborhoods
        .par_iter()
        .map(|nb| {
            let outside = nb
                .vertices()
                .any(|v| partition.bounding.locate(v) == Location::Outside);
            let polys = if outside {
                log::warn!(
                    "neighborhood `{}` extends past the bounding region; clipping",
                    nb.region_id
                );
                clip_region_to_bounding(nb, &partition.bounding)
            } else {
                nb.polygons.clone()
            };
            let total: T = polys.iter().map(Polygon::area).sum();
            if !(total > T::zero()) {
                return Err(SpatialError::ZeroAreaNeighborhood(nb.region_id.clone()));
            }
            let nb_bounds = Bounds::of(polys.iter().flat_map(|p| p.exterior.iter()));
            let row = (0..partition.len())
                .map(|k| {
                    let hit = match (&cell_bounds[k], &nb_bounds) {
                        (Some(cb), Some(nbb)) => cb.intersects(nbb),
                        _ => false,
                    };
                    if !hit {
                        return T::zero();
                    }
                    let a: T = polys
                        .iter()
                        .filter_map(|p| partition.clip_to_site(p, k))
                        .map(|p| p.area())
                        .sum();
                    // slivers can come back with a signed area of -0 or -ε
                    if a > T::zero() {
                        a / total
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    Ok(OverlapMatrix {
        rows: neighborhoods.iter().map(|n| n.region_id.clone()).collect(),
        cols: partition.station_ids.clone(),
        weights: rows.into_iter().flatten().collect(),
    })
}

/// Moves neighborhood feature values onto stations: `f[j] = Σ_i w[i][j] · f[i]`.
pub fn redistribute_features(
    features: &FeatureTable,
    w: &OverlapMatrix<f64>,
) -> Result<FeatureTable, SpatialError> {
    let p = features.n_features();
    let mut values = vec![0.0; w.cols.len() * p];
    for (i, rid) in w.rows.iter().enumerate() {
        let f = features
            .row_for(rid)
            .ok_or_else(|| SpatialError::RegionMismatch(format!("no features for `{rid}`")))?;
        for (j, wij) in w.row(i).iter().enumerate() {
            if *wij == 0.0 {
                continue;
            }
            for (k, v) in f.iter().enumerate() {
                values[j * p + k] += wij * v;
            }
        }
    }
    if let Some(extra) = features
        .region_ids()
        .iter()
        .find(|r| !w.rows.contains(r))
    {
        return Err(SpatialError::RegionMismatch(format!(
            "features for `{extra}` have no overlap row"
        )));
    }
    FeatureTable::new(w.cols.clone(), features.feature_names().to_vec(), values)
        .map_err(|e| SpatialError::RegionMismatch(e.to_string()))
}

/// Finds the region containing `p`. Boundary points go to the
/// lexicographically smallest region id among those touching the point.
pub fn assign_region<'a, T: Scalar>(p: &Point<T>, regions: &'a [Region<T>]) -> Option<&'a str> {
    let mut touching: Option<&str> = None;
    for r in regions {
        match r.locate(p) {
            Location::Inside => return Some(&r.region_id),
            Location::Boundary => {
                if touching.map_or(true, |t| r.region_id.as_str() < t) {
                    touching = Some(&r.region_id);
                }
            }
            Location::Outside => {}
        }
    }
    touching
}

/// [`assign_region`] with a bounding-box prefilter, for bulk lookups.
pub struct RegionLocator<'a, T> {
    regions: &'a [Region<T>],
    bounds: Vec<Option<Bounds<T>>>,
}

impl<'a, T: Scalar> RegionLocator<'a, T> {
    pub fn new(regions: &'a [Region<T>]) -> Self {
        Self {
            regions,
            bounds: regions.iter().map(Region::bounds).collect(),
        }
    }

    pub fn locate(&self, p: &Point<T>) -> Option<&'a str> {
        let mut touching: Option<&'a str> = None;
        for (r, b) in self.regions.iter().zip(&self.bounds) {
            if !b.is_some_and(|b| b.contains(p)) {
                continue;
            }
            match r.locate(p) {
                Location::Inside => return Some(&r.region_id),
                Location::Boundary => {
                    if touching.map_or(true, |t| r.region_id.as_str() < t) {
                        touching = Some(&r.region_id);
                    }
                }
                Location::Outside => {}
            }
        }
        touching
    }
}

fn ring_coords(ring: &[Point<f64>]) -> Vec<Vec<f64>> {
    let mut c: Vec<Vec<f64>> = ring.iter().map(|p| vec![p.x, p.y]).collect();
    if let Some(first) = c.first().cloned() {
        c.push(first);
    }
    c
}

fn polygon_value(p: &Polygon<f64>) -> Vec<Vec<Vec<f64>>> {
    std::iter::once(ring_coords(&p.exterior))
        .chain(p.holes.iter().map(|h| ring_coords(h)))
        .collect()
}

/// GeoJSON feature for a set of WGS84 polygons.
pub fn geojson_feature(
    polygons: &[Polygon<f64>],
    properties: serde_json::Map<String, serde_json::Value>,
) -> geojson::Feature {
    let value = if polygons.len() == 1 {
        geojson::Value::Polygon(polygon_value(&polygons[0]))
    } else {
        geojson::Value::MultiPolygon(polygons.iter().map(polygon_value).collect())
    };
    geojson::Feature {
        bbox: None,
        geometry: Some(geojson::Geometry::new(value)),
        id: None,
        properties: Some(properties),
        foreign_members: None,
    }
}

/// Region polygons (WGS84) annotated with per-region properties.
pub fn regions_geojson(
    regions: &[Region<f64>],
    mut properties: impl FnMut(&str) -> Option<serde_json::Map<String, serde_json::Value>>,
) -> geojson::FeatureCollection {
    let features = regions
        .iter()
        .filter_map(|r| {
            let mut props = properties(&r.region_id)?;
            props.insert("region_id".into(), r.region_id.clone().into());
            Some(geojson_feature(&r.polygons, props))
        })
        .collect();
    geojson::FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    }
}

/// Partition cells mapped back to WGS84, one feature per station with a `station_id` property.
pub fn partition_geojson(
    partition: &VoronoiPartition<f64>,
    projection: &LocalProjection<f64>,
) -> geojson::FeatureCollection {
    let features = partition
        .cells
        .iter()
        .zip(&partition.station_ids)
        .filter_map(|(cell, id)| {
            let cell = cell.as_ref()?.map(|p| projection.inverse(p));
            let mut props = serde_json::Map::new();
            props.insert("station_id".into(), id.clone().into());
            Some(geojson_feature(&[cell], props))
        })
        .collect();
    geojson::FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    }
}

/// Axis-aligned box around every vertex of `regions`, grown by `margin` of its size.
pub fn envelope<T: Scalar>(regions: &[Region<T>], margin: T) -> Option<Polygon<T>> {
    let b = Bounds::of(regions.iter().flat_map(|r| r.vertices()))?;
    let dx = (b.max.x - b.min.x) * margin;
    let dy = (b.max.y - b.min.y) * margin;
    Some(Polygon::rect(b.min.x - dx, b.min.y - dy, b.max.x + dx, b.max.y + dy))
}

/// Station ids whose cells are non-empty, with their planar areas.
pub fn cell_areas<T: Scalar>(p: &VoronoiPartition<T>) -> BTreeMap<String, T> {
    p.station_ids
        .iter()
        .enumerate()
        .map(|(k, id)| (id.clone(), p.cell_area(k)))
        .collect()
}
