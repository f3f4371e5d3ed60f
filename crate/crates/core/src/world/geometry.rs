//! Intersection layout: route polylines, arc-length poses and polyline
//! intersection tests.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lengths below this are treated as zero when intersecting segments.
const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    fn scale(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// Unit normal to the right of this direction.
    fn right(self) -> Point2 {
        Point2::new(self.y, -self.x)
    }

    fn left(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }
}

/// Compass side a vehicle enters the intersection from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Approach {
    North,
    East,
    South,
    West,
}

impl Approach {
    pub const ALL: [Approach; 4] = [
        Approach::North,
        Approach::East,
        Approach::South,
        Approach::West,
    ];

    /// Unit travel direction of vehicles arriving from this side.
    pub fn travel_direction(self) -> Point2 {
        match self {
            Approach::North => Point2::new(0.0, -1.0),
            Approach::East => Point2::new(-1.0, 0.0),
            Approach::South => Point2::new(0.0, 1.0),
            Approach::West => Point2::new(1.0, 0.0),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intent {
    Left,
    Straight,
    Right,
}

impl Intent {
    pub const ALL: [Intent; 3] = [Intent::Left, Intent::Straight, Intent::Right];
}

/// One of the twelve approach/turn combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RouteId {
    pub approach: Approach,
    pub intent: Intent,
}

impl RouteId {
    pub const COUNT: usize = 12;

    pub const fn new(approach: Approach, intent: Intent) -> Self {
        Self { approach, intent }
    }

    pub fn all() -> impl Iterator<Item = RouteId> {
        Approach::ALL
            .into_iter()
            .flat_map(|a| Intent::ALL.into_iter().map(move |i| RouteId::new(a, i)))
    }

    /// Dense index in `0..12`, approach-major.
    pub fn index(self) -> usize {
        self.approach.index() * 3 + self.intent as usize
    }

    pub fn from_index(index: usize) -> Option<RouteId> {
        if index >= Self::COUNT {
            return None;
        }
        Some(RouteId::new(Approach::ALL[index / 3], Intent::ALL[index % 3]))
    }

    /// Unit heading on the exit leg.
    pub fn exit_direction(self) -> Point2 {
        let d = self.approach.travel_direction();
        match self.intent {
            Intent::Straight => d,
            Intent::Right => d.right(),
            Intent::Left => d.left(),
        }
    }

    /// Exit leg identified by its heading, as an index in `0..4`.
    pub fn exit_leg(self) -> usize {
        let d = self.exit_direction();
        Approach::ALL
            .iter()
            .position(|a| a.travel_direction().dot(d) > 0.5)
            .expect("exit direction is axis aligned")
    }
}

impl fmt::Display for RouteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.approach {
            Approach::North => 'N',
            Approach::East => 'E',
            Approach::South => 'S',
            Approach::West => 'W',
        };
        let i = match self.intent {
            Intent::Left => 'L',
            Intent::Straight => 'S',
            Intent::Right => 'R',
        };
        write!(f, "{a}{i}")
    }
}

/// Dimensions of the four-way one-lane intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionLayout {
    /// Length of every approach and exit leg (m).
    pub leg_length: f64,
    /// Half the side of the square central box (m).
    pub box_half_width: f64,
    /// Lateral offset of a lane from the road centerline (m).
    pub lane_offset: f64,
    /// Maximum sagitta of one arc chord (m).
    pub chord_tolerance: f64,
}

impl Default for IntersectionLayout {
    fn default() -> Self {
        Self {
            leg_length: 100.0,
            box_half_width: 10.0,
            lane_offset: 1.75,
            chord_tolerance: 0.05,
        }
    }
}

impl IntersectionLayout {
    pub fn right_turn_radius(&self) -> f64 {
        self.box_half_width - self.lane_offset
    }

    pub fn left_turn_radius(&self) -> f64 {
        self.box_half_width + self.lane_offset
    }
}

/// A route polyline with cached cumulative arc lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteGeometry {
    pub id: RouteId,
    pub polyline: Vec<Point2>,
    /// `cum[k]` is the arc length at vertex `k`.
    cum: Vec<f64>,
    pub length: f64,
    /// Arc length at which the route enters the central box.
    pub box_entry: f64,
    /// Arc length at which the route leaves the central box.
    pub box_exit: f64,
}

impl RouteGeometry {
    fn from_polyline(id: RouteId, polyline: Vec<Point2>, box_entry_vertex: usize, box_exit_vertex: usize) -> Self {
        let mut cum = Vec::with_capacity(polyline.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in polyline.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        Self {
            id,
            box_entry: cum[box_entry_vertex],
            box_exit: cum[box_exit_vertex],
            polyline,
            cum,
            length: acc,
        }
    }

    pub fn cumulative_lengths(&self) -> &[f64] {
        &self.cum
    }

    pub fn segment_count(&self) -> usize {
        self.polyline.len() - 1
    }

    /// Position and heading at arc length `s`.
    ///
    /// At an interior vertex the heading of the segment ending there is used.
    pub fn pose_of(&self, s: f64) -> Result<(Point2, f64)> {
        if !(0.0..=self.length).contains(&s) {
            return Err(Error::OutOfRange {
                what: "arc length",
                value: s,
            });
        }
        // first k with cum[k + 1] >= s
        let k = self.cum[1..]
            .partition_point(|&c| c < s)
            .min(self.segment_count() - 1);
        let (a, b) = (self.polyline[k], self.polyline[k + 1]);
        let seg = self.cum[k + 1] - self.cum[k];
        let t = ((s - self.cum[k]) / seg).clamp(0.0, 1.0);
        let d = b.sub(a);
        Ok((a.add(d.scale(t)), d.y.atan2(d.x)))
    }
}

/// Builds the twelve routes of the intersection, indexed by [`RouteId::index`].
///
/// Straight routes are axis-aligned. Turns are quarter circles centred on a
/// corner of the central box, so both ends join the legs tangentially.
pub fn build_network(layout: &IntersectionLayout) -> Vec<RouteGeometry> {
    RouteId::all().map(|id| build_route(layout, id)).collect()
}

fn build_route(layout: &IntersectionLayout, id: RouteId) -> RouteGeometry {
    let b = layout.box_half_width;
    let w = layout.lane_offset;
    let d_in = id.approach.travel_direction();
    let d_out = id.exit_direction();

    let entry = d_in.scale(-b).add(d_in.right().scale(w));
    let start = entry.sub(d_in.scale(layout.leg_length));
    let exit = d_out.scale(b).add(d_out.right().scale(w));
    let end = exit.add(d_out.scale(layout.leg_length));

    let mut pts = vec![start, entry];
    match id.intent {
        Intent::Straight => {}
        Intent::Right | Intent::Left => {
            let (radius, normal, sweep) = if id.intent == Intent::Right {
                (layout.right_turn_radius(), d_in.right(), -FRAC_PI_2)
            } else {
                (layout.left_turn_radius(), d_in.left(), FRAC_PI_2)
            };
            let centre = entry.add(normal.scale(radius));
            let theta0 = (entry.y - centre.y).atan2(entry.x - centre.x);
            let max_step = 2.0 * (1.0 - layout.chord_tolerance / radius).clamp(-1.0, 1.0).acos();
            let n = (FRAC_PI_2 / max_step).ceil().max(1.0) as usize;
            for k in 1..n {
                let th = theta0 + sweep * k as f64 / n as f64;
                pts.push(Point2::new(centre.x + radius * th.cos(), centre.y + radius * th.sin()));
            }
        }
    }
    let exit_vertex = pts.len();
    pts.push(exit);
    pts.push(end);
    RouteGeometry::from_polyline(id, pts, 1, exit_vertex)
}

/// Contact between two segments: fractional positions along each.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SegmentContact {
    t_a: f64,
    t_b: f64,
}

/// First contact point of segment `a0→a1` with `b0→b1`, earliest along `a`.
fn segment_contact(a0: Point2, a1: Point2, b0: Point2, b1: Point2) -> Option<SegmentContact> {
    let r = a1.sub(a0);
    let s = b1.sub(b0);
    let qp = b0.sub(a0);
    let rr = r.dot(r);
    let ss = s.dot(s);
    let denom = r.cross(s);
    let scale = rr.sqrt() * ss.sqrt();

    if denom.abs() > GEOM_EPS * scale {
        let t = qp.cross(s) / denom;
        let u = qp.cross(r) / denom;
        let tol_t = GEOM_EPS / rr.sqrt();
        let tol_u = GEOM_EPS / ss.sqrt();
        if t >= -tol_t && t <= 1.0 + tol_t && u >= -tol_u && u <= 1.0 + tol_u {
            return Some(SegmentContact {
                t_a: t.clamp(0.0, 1.0),
                t_b: u.clamp(0.0, 1.0),
            });
        }
        return None;
    }

    // parallel: only collinear overlaps count
    if qp.cross(r).abs() > GEOM_EPS * rr.sqrt() {
        return None;
    }
    let t0 = qp.dot(r) / rr;
    let t1 = b1.sub(a0).dot(r) / rr;
    let lo = t0.min(t1).max(0.0);
    let hi = t0.max(t1).min(1.0);
    let tol = GEOM_EPS / rr.sqrt();
    if lo > hi + tol {
        return None;
    }
    let p = a0.add(r.scale(lo));
    let u = (p.sub(b0).dot(s) / ss).clamp(0.0, 1.0);
    Some(SegmentContact { t_a: lo, t_b: u })
}

/// All contacts between two polylines as arc-length pairs, one per segment
/// pair that touches, in segment-pair order.
pub fn polyline_contacts(a: &RouteGeometry, b: &RouteGeometry) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 0..a.segment_count() {
        let (a0, a1) = (a.polyline[i], a.polyline[i + 1]);
        let len_a = a.cum[i + 1] - a.cum[i];
        for j in 0..b.segment_count() {
            let (b0, b1) = (b.polyline[j], b.polyline[j + 1]);
            if let Some(c) = segment_contact(a0, a1, b0, b1) {
                let len_b = b.cum[j + 1] - b.cum[j];
                out.push((a.cum[i] + c.t_a * len_a, b.cum[j] + c.t_b * len_b));
            }
        }
    }
    out
}

/// Earliest contact of `a` with `b`, ordered by arc length along `a`.
pub fn first_contact(a: &RouteGeometry, b: &RouteGeometry) -> Option<(f64, f64)> {
    polyline_contacts(a, b)
        .into_iter()
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Vec<RouteGeometry> {
        build_network(&IntersectionLayout::default())
    }

    fn route(net: &[RouteGeometry], a: Approach, i: Intent) -> &RouteGeometry {
        &net[RouteId::new(a, i).index()]
    }

    #[test]
    fn twelve_routes_indexed_consistently() {
        let n = net();
        assert_eq!(n.len(), 12);
        for (k, r) in n.iter().enumerate() {
            assert_eq!(r.id.index(), k);
            assert_eq!(RouteId::from_index(k), Some(r.id));
        }
        assert_eq!(RouteId::from_index(12), None);
    }

    #[test]
    fn polylines_are_well_formed() {
        for r in net() {
            assert!(r.polyline.len() >= 2);
            let mut sum = 0.0;
            for w in r.polyline.windows(2) {
                let d = w[0].dist(w[1]);
                assert!(d > 0.0, "{} has repeated vertices", r.id);
                sum += d;
            }
            assert!((sum - r.length).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_routes_are_axis_aligned() {
        for r in net().iter().filter(|r| r.id.intent == Intent::Straight) {
            assert_eq!(r.polyline.len(), 4);
            let d = r.polyline[3].sub(r.polyline[0]);
            assert!(d.x.abs() < 1e-12 || d.y.abs() < 1e-12);
            assert!((r.length - 220.0).abs() < 1e-9);
        }
    }

    #[test]
    fn arcs_respect_chord_tolerance() {
        let layout = IntersectionLayout::default();
        for r in net().iter().filter(|r| r.id.intent != Intent::Straight) {
            let radius = if r.id.intent == Intent::Right {
                layout.right_turn_radius()
            } else {
                layout.left_turn_radius()
            };
            let arc = &r.polyline[1..r.polyline.len() - 1];
            for w in arc.windows(2) {
                let chord = w[0].dist(w[1]);
                let sagitta = radius - (radius * radius - chord * chord / 4.0).sqrt();
                assert!(sagitta <= 0.5);
                assert!(sagitta <= layout.chord_tolerance + 1e-12);
            }
        }
    }

    #[test]
    fn pose_boundaries_and_midpoint() {
        let n = net();
        let r = route(&n, Approach::North, Intent::Straight);
        let (p0, _) = r.pose_of(0.0).unwrap();
        assert_eq!(p0, r.polyline[0]);
        let (p1, _) = r.pose_of(r.length).unwrap();
        assert!(p1.dist(*r.polyline.last().unwrap()) < 1e-12);
        assert!(r.pose_of(-1e-6).is_err());
        assert!(r.pose_of(r.length + 1e-6).is_err());

        let two = RouteGeometry::from_polyline(
            r.id,
            vec![Point2::new(1.0, 2.0), Point2::new(4.0, 6.0)],
            0,
            1,
        );
        let (mid, heading) = two.pose_of(two.length / 2.0).unwrap();
        assert!((mid.x - 2.5).abs() < 1e-12 && (mid.y - 4.0).abs() < 1e-12);
        assert!((heading - 4f64.atan2(3.0)).abs() < 1e-12);
    }

    #[test]
    fn vertex_pose_uses_earlier_segment_heading() {
        let n = net();
        let r = route(&n, Approach::North, Intent::Right);
        let s_exit = r.box_exit;
        let (_, h) = r.pose_of(s_exit).unwrap();
        let k = r.polyline.len() - 2;
        let d = r.polyline[k].sub(r.polyline[k - 1]);
        assert!((h - d.y.atan2(d.x)).abs() < 1e-12);
    }

    #[test]
    fn opposing_straights_never_touch() {
        let n = net();
        for (a, b) in [(Approach::North, Approach::South), (Approach::East, Approach::West)] {
            let ra = route(&n, a, Intent::Straight);
            let rb = route(&n, b, Intent::Straight);
            assert!(polyline_contacts(ra, rb).is_empty());
        }
    }

    #[test]
    fn shared_approach_meets_at_start() {
        let n = net();
        let a = route(&n, Approach::West, Intent::Left);
        let b = route(&n, Approach::West, Intent::Right);
        assert_eq!(first_contact(a, b), Some((0.0, 0.0)));
    }

    #[test]
    fn exit_legs_match_headings() {
        let n = RouteId::new(Approach::North, Intent::Straight);
        let el = RouteId::new(Approach::East, Intent::Left);
        let wr = RouteId::new(Approach::West, Intent::Right);
        assert_eq!(n.exit_leg(), el.exit_leg());
        assert_eq!(n.exit_leg(), wr.exit_leg());
        assert_eq!(n.exit_leg(), Approach::North as usize);
    }
}
