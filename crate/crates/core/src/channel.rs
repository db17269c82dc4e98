//! LoS channels from pair geometry, an image-source NLoS component, and
//! per-UE composite channels.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{Point2, Point3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pair_geometry, placement_to_triplet, AngleTriplet, LinearArray, PairGeometry, Placement};
use crate::linalg::CMat;

/// Free-space LoS response of a single antenna pair at distance `d`.
#[inline]
pub fn free_space(d: f64, wavelength: f64) -> Complex64 {
    let phase = -2.0 * PI * (d / wavelength).fract();
    Complex64::from_polar(wavelength / (4.0 * PI * d), phase)
}

/// LoS channel matrix (`N x M`) from antenna-pair distances.
pub fn los_channel(pg: &PairGeometry, wavelength: f64) -> Result<CMat> {
    if !(wavelength > 0.0) {
        return Err(Error::invalid("wavelength must be positive"));
    }
    if let Some(d) = pg.dist.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::domain(format!("antenna-pair distance {d} is not positive")));
    }
    Ok(pg.dist.map(|d| free_space(d, wavelength)))
}

/// Reflection coefficients of the room surfaces. A zero coefficient removes
/// the surface from the image-source expansion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceCoefficients {
    /// Both walls parallel to the BS array (`y = +-depth/2`).
    pub side_walls: f64,
    pub ceiling: f64,
    pub floor: f64,
    /// Wall facing the BS (`x = width/2`).
    pub far_wall: f64,
}

impl Default for SurfaceCoefficients {
    fn default() -> Self {
        Self { side_walls: 0.6, ceiling: 0.6, floor: 0.0, far_wall: 0.0 }
    }
}

/// Box-shaped room centered on the BS array center: `x in [-w/2, w/2]`,
/// `y in [-D/2, D/2]`, `z in [0, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomModel {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    pub coefficients: SurfaceCoefficients,
    /// 0 disables NLoS, 1 keeps single bounces, 2 adds double bounces.
    pub max_order: u8,
}

impl Default for RoomModel {
    fn default() -> Self {
        Self {
            width: 15.0,
            depth: 17.0,
            height: 8.0,
            coefficients: SurfaceCoefficients::default(),
            max_order: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Plane {
    axis: usize,
    offset: f64,
    coeff: f64,
}

impl Plane {
    fn mirror(&self, p: Point3<f64>) -> Point3<f64> {
        let mut q = p;
        q[self.axis] = 2.0 * self.offset - p[self.axis];
        q
    }
}

impl RoomModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.depth > 0.0 && self.height > 0.0) {
            return Err(Error::invalid("room dimensions must be positive"));
        }
        let c = self.coefficients;
        if [c.side_walls, c.ceiling, c.floor, c.far_wall].iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("reflection coefficients must lie in [0, 1]"));
        }
        if self.max_order > 2 {
            return Err(Error::invalid("max reflection order is 2"));
        }
        Ok(())
    }

    pub fn contains(&self, p: Point3<f64>) -> bool {
        p.x.abs() < 0.5 * self.width && p.y.abs() < 0.5 * self.depth && p.z > 0.0 && p.z < self.height
    }

    fn planes(&self) -> Vec<Plane> {
        let c = self.coefficients;
        let all = [
            Plane { axis: 1, offset: 0.5 * self.depth, coeff: c.side_walls },
            Plane { axis: 1, offset: -0.5 * self.depth, coeff: c.side_walls },
            Plane { axis: 2, offset: self.height, coeff: c.ceiling },
            Plane { axis: 2, offset: 0.0, coeff: c.floor },
            Plane { axis: 0, offset: 0.5 * self.width, coeff: c.far_wall },
        ];
        all.into_iter().filter(|p| p.coeff > 0.0).collect()
    }

    /// Image sources of `p` as `(image position, amplitude factor)`.
    ///
    /// Double bounces off two parallel surfaces give two distinct images (one
    /// per ordering); perpendicular pairs commute and give one.
    pub fn images(&self, p: Point3<f64>) -> Vec<(Point3<f64>, f64)> {
        let planes = self.planes();
        let mut out = Vec::new();
        if self.max_order >= 1 {
            out.extend(planes.iter().map(|s| (s.mirror(p), s.coeff)));
        }
        if self.max_order >= 2 {
            for (i, a) in planes.iter().enumerate() {
                for b in &planes[i + 1..] {
                    let amp = a.coeff * b.coeff;
                    out.push((b.mirror(a.mirror(p)), amp));
                    if a.axis == b.axis {
                        out.push((a.mirror(b.mirror(p)), amp));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeSpec {
    pub array: LinearArray,
    pub placement: Placement,
}

/// Physical setup shared by every module. Powers and noise are in watts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub wavelength: f64,
    pub bs: LinearArray,
    pub ues: Vec<UeSpec>,
    pub room: RoomModel,
    /// Height of the common BS/UE plane.
    pub plane_height: f64,
    pub bs_power: f64,
    pub pilot_power: f64,
    pub ue_noise: f64,
    pub bs_noise: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0) {
            return Err(Error::invalid("wavelength must be positive"));
        }
        for (name, v) in [
            ("bs_power", self.bs_power),
            ("pilot_power", self.pilot_power),
            ("ue_noise", self.ue_noise),
            ("bs_noise", self.bs_noise),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        self.room.validate()?;
        for k in 0..self.ues.len() {
            for p in self.ue_world_positions(k)? {
                if !self.room.contains(p) {
                    return Err(Error::Infeasible(format!("UE {k} leaves the room at {p:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn num_ues(&self) -> usize {
        self.ues.len()
    }

    pub fn triplet(&self, k: usize) -> Result<AngleTriplet> {
        let ue = &self.ues[k];
        placement_to_triplet(&ue.placement, &self.bs, &ue.array)
    }

    pub fn pair_geometry(&self, k: usize) -> Result<PairGeometry> {
        pair_geometry(&self.triplet(k)?, &self.bs, &self.ues[k].array)
    }

    fn to_world(&self, p: Point2<f64>) -> Point3<f64> {
        Point3::new(p.x, p.y - 0.5 * self.bs.aperture(), self.plane_height)
    }

    /// BS element positions in the room frame (array center at the origin).
    pub fn bs_world_positions(&self) -> Vec<Point3<f64>> {
        self.bs.offsets().iter().map(|&l| self.to_world(Point2::new(0.0, l))).collect()
    }

    pub fn ue_world_positions(&self, k: usize) -> Result<Vec<Point3<f64>>> {
        let ue = self.ues.get(k).ok_or_else(|| Error::invalid(format!("no UE {k}")))?;
        placement_to_triplet(&ue.placement, &self.bs, &ue.array)?;
        Ok(ue
            .placement
            .ue_positions(&self.bs, &ue.array)
            .into_iter()
            .map(|p| self.to_world(p))
            .collect())
    }
}

/// Sum of first- and second-order image-source paths for UE `k` (`N x M`).
pub fn nlos_channel(scenario: &Scenario, k: usize) -> Result<CMat> {
    let bs = scenario.bs_world_positions();
    let ue = scenario.ue_world_positions(k)?;
    let lam = scenario.wavelength;
    let mut h = CMat::zeros(ue.len(), bs.len());
    for (n, &p) in ue.iter().enumerate() {
        for (img, amp) in scenario.room.images(p) {
            for (m, b) in bs.iter().enumerate() {
                h[(n, m)] += free_space((img - b).norm(), lam) * amp;
            }
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UeChannel {
    pub los: CMat,
    pub nlos: CMat,
    pub composite: CMat,
}

impl UeChannel {
    pub fn new(los: CMat, nlos: CMat) -> Result<Self> {
        if los.shape() != nlos.shape() {
            return Err(Error::Dimension(format!(
                "LoS {:?} vs NLoS {:?}",
                los.shape(),
                nlos.shape()
            )));
        }
        let composite = &los + &nlos;
        Ok(Self { los, nlos, composite })
    }

    pub fn los_only(los: CMat) -> Self {
        let nlos = CMat::zeros(los.nrows(), los.ncols());
        Self { composite: los.clone(), los, nlos }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub ues: Vec<UeChannel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NlosMode {
    Off,
    On,
}

/// Builds every UE's channel. Generation is deterministic: all randomness lives
/// in the placements already recorded in `scenario`.
pub fn generate_channels(scenario: &Scenario, nlos: NlosMode) -> Result<ChannelSet> {
    let ues = (0..scenario.num_ues())
        .map(|k| {
            let los = los_channel(&scenario.pair_geometry(k)?, scenario.wavelength)?;
            match nlos {
                NlosMode::Off => Ok(UeChannel::los_only(los)),
                NlosMode::On => UeChannel::new(los, nlos_channel(scenario, k)?),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSet { ues })
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    component: String,
    ue: usize,
    n: usize,
    m: usize,
    re: f64,
    im: f64,
}

/// Writes LoS and NLoS entries as CSV with header `component,ue,n,m,re,im`.
/// The composite is implied and rebuilt on import.
pub fn write_channels_csv<W: Write>(set: &ChannelSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (k, ch) in set.ues.iter().enumerate() {
        for (name, mat) in [("los", &ch.los), ("nlos", &ch.nlos)] {
            for m in 0..mat.ncols() {
                for n in 0..mat.nrows() {
                    let z = mat[(n, m)];
                    w.serialize(EntryRecord { component: name.into(), ue: k, n, m, re: z.re, im: z.im })?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_channels_csv<R: Read>(input: R) -> Result<ChannelSet> {
    let mut rdr = csv::Reader::from_reader(input);
    let recs = rdr.deserialize().collect::<std::result::Result<Vec<EntryRecord>, _>>()?;
    let k_count = recs.iter().map(|r| r.ue + 1).max().unwrap_or(0);
    let mut shapes = vec![(0usize, 0usize); k_count];
    for r in &recs {
        let s = &mut shapes[r.ue];
        *s = (s.0.max(r.n + 1), s.1.max(r.m + 1));
    }
    let mut los: Vec<CMat> = shapes.iter().map(|&(n, m)| CMat::zeros(n, m)).collect();
    let mut nlos = los.clone();
    for r in recs {
        let z = Complex64::new(r.re, r.im);
        match r.component.as_str() {
            "los" => los[r.ue][(r.n, r.m)] = z,
            "nlos" => nlos[r.ue][(r.n, r.m)] = z,
            other => return Err(Error::invalid(format!("unknown channel component `{other}`"))),
        }
    }
    let ues = los
        .into_iter()
        .zip(nlos)
        .map(|(l, n)| UeChannel::new(l, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSet { ues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pair_geometry_with_reference;

    fn scenario(placements: &[Placement]) -> Scenario {
        let bs = LinearArray::uniform_span(64, 2.0).unwrap();
        let ue = LinearArray::uniform(4, 0.015).unwrap();
        Scenario {
            wavelength: 0.03,
            bs,
            ues: placements.iter().map(|&p| UeSpec { array: ue.clone(), placement: p }).collect(),
            room: RoomModel::default(),
            plane_height: 1.5,
            bs_power: 1e-3,
            pilot_power: 1e-3,
            ue_noise: 1e-12,
            bs_noise: 1e-12,
            seed: 1,
        }
    }

    fn single(d: f64) -> PairGeometry {
        let one = LinearArray::new(vec![0.0]).unwrap();
        pair_geometry_with_reference(&AngleTriplet::new(0.0, 0.0, 0.0), d, &one, &one).unwrap()
    }

    #[test]
    fn free_space_phase_wraps() {
        let lam = 0.03;
        let h = los_channel(&single(lam), lam).unwrap()[(0, 0)];
        assert!((h - Complex64::new(1.0 / (4.0 * PI), 0.0)).norm() < 1e-15);
        let h = los_channel(&single(lam / 2.0), lam).unwrap()[(0, 0)];
        assert!((h - Complex64::new(-1.0 / (2.0 * PI), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn los_magnitude_is_inverse_distance() {
        let s = scenario(&[Placement::new(5.0, 0.3, 1.0).unwrap()]);
        let pg = s.pair_geometry(0).unwrap();
        let h = los_channel(&pg, s.wavelength).unwrap();
        for (z, d) in h.iter().zip(pg.dist.iter()) {
            assert!((z.norm() - s.wavelength / (4.0 * PI * d)).abs() < 1e-15);
        }
    }

    #[test]
    fn near_field_los_has_rank_above_one() {
        let s = scenario(&[Placement::new(5.0, 0.0, 0.0).unwrap()]);
        let h = los_channel(&s.pair_geometry(0).unwrap(), s.wavelength).unwrap();
        let sv = h.singular_values();
        assert!(sv[1] > 1e-6 * sv[0]);
    }

    #[test]
    fn zero_coefficients_give_no_nlos() {
        let mut s = scenario(&[Placement::new(6.0, -0.5, 2.0).unwrap()]);
        s.room.coefficients = SurfaceCoefficients { side_walls: 0.0, ceiling: 0.0, floor: 0.0, far_wall: 0.0 };
        let h = nlos_channel(&s, 0).unwrap();
        assert!(h.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn single_ceiling_bounce_by_hand() {
        let mut s = scenario(&[Placement::new(6.0, 0.2, 0.7).unwrap()]);
        s.room.coefficients = SurfaceCoefficients { side_walls: 0.0, ceiling: 0.5, floor: 0.0, far_wall: 0.0 };
        s.room.max_order = 1;
        let h = nlos_channel(&s, 0).unwrap();
        let bs = s.bs_world_positions();
        let ue = s.ue_world_positions(0).unwrap();
        // Mirror in z = 8: UE at z = 1.5 appears at z = 14.5.
        let (p, b) = (ue[2], bs[10]);
        let horiz = ((p.x - b.x).powi(2) + (p.y - b.y).powi(2)).sqrt();
        let dpath = (horiz * horiz + 13.0f64.powi(2)).sqrt();
        let expect = free_space(dpath, s.wavelength) * 0.5;
        assert!((h[(2, 10)] - expect).norm() < 1e-15);
        assert!((h[(2, 10)].norm() - 0.5 * s.wavelength / (4.0 * PI * dpath)).abs() < 1e-15);
    }

    #[test]
    fn image_counts() {
        let room = RoomModel::default();
        let p = Point3::new(3.0, 1.0, 1.5);
        // Side walls + ceiling: 3 single bounces, wall/wall (2 orders) + 2 wall/ceiling.
        assert_eq!(room.images(p).len(), 3 + 2 + 2);
        for (img, _) in room.images(p) {
            assert!((img - p).norm() > 0.0);
        }
    }

    #[test]
    fn reflected_paths_are_longer() {
        let s = scenario(&[Placement::new(5.0, 0.4, 0.3).unwrap()]);
        let bs = s.bs_world_positions();
        for p in s.ue_world_positions(0).unwrap() {
            for (img, _) in s.room.images(p) {
                for b in &bs {
                    assert!((img - b).norm() > (p - b).norm());
                }
            }
        }
    }

    #[test]
    fn nlos_disabled_is_exact_los() {
        let s = scenario(&[Placement::new(5.0, 0.1, 0.2).unwrap(), Placement::new(7.0, -0.6, 2.5).unwrap()]);
        let set = generate_channels(&s, NlosMode::Off).unwrap();
        for ch in &set.ues {
            assert_eq!(ch.composite, ch.los);
        }
        let set = generate_channels(&s, NlosMode::On).unwrap();
        for ch in &set.ues {
            assert_eq!(ch.composite, &ch.los + &ch.nlos);
            assert!(ch.nlos.norm() < ch.los.norm());
        }
        assert_eq!(set, generate_channels(&s, NlosMode::On).unwrap());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let s = scenario(&[Placement::new(5.0, 0.1, 0.2).unwrap(), Placement::new(7.0, -0.6, 2.5).unwrap()]);
        let set = generate_channels(&s, NlosMode::On).unwrap();
        let mut buf = Vec::new();
        write_channels_csv(&set, &mut buf).unwrap();
        assert!(buf.starts_with(b"component,ue,n,m,re,im\n"));
        let back = read_channels_csv(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn room_containment() {
        let mut s = scenario(&[Placement::new(8.4, 0.0, 0.0).unwrap()]);
        assert!(matches!(s.validate(), Err(Error::Infeasible(_))));
        s.ues[0].placement = Placement::new(6.0, 0.0, 0.0).unwrap();
        s.validate().unwrap();
    }
}
