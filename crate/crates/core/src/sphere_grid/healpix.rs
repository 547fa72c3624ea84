//! NESTED-scheme Healpix index arithmetic and geometry.
//!
//! A pixel is addressed by `(face, ix, iy)` with `face` in `0..12` and
//! `ix, iy` in `0..nside`. Faces 0–3 form the north cap, 4–7 the equatorial
//! belt and 8–11 the south cap. Within a face the nested sub-index interleaves
//! the bits of `ix` (even positions) and `iy` (odd positions), so the four
//! children of pixel `p` at `2·nside` are `4p..4p+4`.

use std::f64::consts::PI;

use nalgebra::Vector3;

const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

const NB_XOFFSET: [i64; 8] = [-1, -1, 0, 1, 1, 1, 0, -1];
const NB_YOFFSET: [i64; 8] = [0, 1, 1, 1, 0, -1, -1, -1];

// Face reached when stepping off a face; row = 3x3 direction code (S, SE, E,
// SW, centre, NE, W, NW, N), column = source face. -1: no such face.
const NB_FACEARRAY: [[i64; 12]; 9] = [
    [8, 9, 10, 11, -1, -1, -1, -1, 10, 11, 8, 9],
    [5, 6, 7, 4, 8, 9, 10, 11, 9, 10, 11, 8],
    [-1, -1, -1, -1, 5, 6, 7, 4, -1, -1, -1, -1],
    [4, 5, 6, 7, 11, 8, 9, 10, 11, 8, 9, 10],
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
    [1, 2, 3, 0, 0, 1, 2, 3, 5, 6, 7, 4],
    [-1, -1, -1, -1, 7, 4, 5, 6, -1, -1, -1, -1],
    [3, 0, 1, 2, 3, 0, 1, 2, 4, 5, 6, 7],
    [2, 3, 0, 1, -1, -1, -1, -1, 0, 1, 2, 3],
];

// Coordinate transform bits (1: flip x, 2: flip y, 4: swap) indexed by
// direction code and face row (north, equator, south).
const NB_SWAPARRAY: [[u8; 3]; 9] = [
    [0, 0, 3],
    [0, 0, 6],
    [0, 0, 0],
    [0, 0, 5],
    [0, 0, 0],
    [5, 0, 0],
    [0, 0, 0],
    [6, 0, 0],
    [3, 0, 0],
];

#[inline]
pub fn npix(nside: usize) -> usize {
    12 * nside * nside
}

fn spread_bits(mut v: u64) -> u64 {
    let mut out = 0u64;
    let mut bit = 0;
    while v > 0 {
        out |= (v & 1) << (2 * bit);
        v >>= 1;
        bit += 1;
    }
    out
}

fn compress_bits(mut v: u64) -> u64 {
    let mut out = 0u64;
    let mut bit = 0;
    while v > 0 {
        out |= (v & 1) << bit;
        v >>= 2;
        bit += 1;
    }
    out
}

/// Nested index → `(face, ix, iy)`.
pub fn nest_to_xyf(pix: usize, nside: usize) -> (usize, usize, usize) {
    let npface = nside * nside;
    let face = pix / npface;
    let sub = (pix % npface) as u64;
    let ix = compress_bits(sub) as usize;
    let iy = compress_bits(sub >> 1) as usize;
    (face, ix, iy)
}

/// `(face, ix, iy)` → nested index.
pub fn xyf_to_nest(face: usize, ix: usize, iy: usize, nside: usize) -> usize {
    face * nside * nside + (spread_bits(ix as u64) | (spread_bits(iy as u64) << 1)) as usize
}

/// Continuous face coordinates `(x, y) ∈ [0,1]²` → `(z, phi)`.
pub fn face_xy_to_zphi(x: f64, y: f64, face: usize) -> (f64, f64) {
    let jr = JRLL[face] as f64 - x - y;
    let (nr, z) = if jr < 1.0 {
        (jr, 1.0 - jr * jr / 3.0)
    } else if jr > 3.0 {
        let nr = 4.0 - jr;
        (nr, nr * nr / 3.0 - 1.0)
    } else {
        (1.0, (2.0 - jr) * 2.0 / 3.0)
    };
    let mut tmp = JPLL[face] as f64 * nr + x - y;
    if tmp < 0.0 {
        tmp += 8.0;
    }
    if tmp >= 8.0 {
        tmp -= 8.0;
    }
    let phi = if nr < 1e-15 { 0.0 } else { 0.25 * PI * tmp / nr };
    (z, phi)
}

pub fn zphi_to_vec(z: f64, phi: f64) -> Vector3<f64> {
    let st = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(st * phi.cos(), st * phi.sin(), z)
}

/// Rotates `v` about +z by `k · 90°` using exact coordinate swaps.
pub fn quarter_turn(v: Vector3<f64>, k: usize) -> Vector3<f64> {
    match k % 4 {
        0 => v,
        1 => Vector3::new(-v.y, v.x, v.z),
        2 => Vector3::new(-v.x, -v.y, v.z),
        _ => Vector3::new(v.y, -v.x, v.z),
    }
}

// Faces in the same row differ by a quarter turn about z. Points are computed
// on the row's first face and rotated exactly, so the z-rotation symmetry of
// the grid holds bit-for-bit.
fn face_point(face: usize, x: f64, y: f64) -> Vector3<f64> {
    let (z, phi) = face_xy_to_zphi(x, y, face - face % 4);
    quarter_turn(zphi_to_vec(z, phi), face % 4)
}

/// Unit vector of the pixel centre.
pub fn pixel_center(pix: usize, nside: usize) -> Vector3<f64> {
    let (face, ix, iy) = nest_to_xyf(pix, nside);
    let ns = nside as f64;
    face_point(face, (ix as f64 + 0.5) / ns, (iy as f64 + 0.5) / ns)
}

/// The four pixel corners (unit vectors).
pub fn pixel_corners(pix: usize, nside: usize) -> [Vector3<f64>; 4] {
    let (face, ix, iy) = nest_to_xyf(pix, nside);
    let ns = nside as f64;
    let corner = |dx: f64, dy: f64| face_point(face, (ix as f64 + dx) / ns, (iy as f64 + dy) / ns);
    [corner(0.0, 0.0), corner(1.0, 0.0), corner(1.0, 1.0), corner(0.0, 1.0)]
}

/// Distinct neighbouring pixels (edge or corner contact), sorted ascending.
///
/// Returns 8 neighbours except at the 24 pixels touching the 8 points where
/// only three faces meet (7), and at `nside == 1` where faces touch 6 others.
pub fn neighbours(pix: usize, nside: usize) -> Vec<usize> {
    let (face, ix, iy) = nest_to_xyf(pix, nside);
    let ns = nside as i64;
    let (ix, iy) = (ix as i64, iy as i64);
    let mut out = Vec::with_capacity(8);
    for k in 0..8 {
        let mut x = ix + NB_XOFFSET[k];
        let mut y = iy + NB_YOFFSET[k];
        let mut nbnum = 4i64;
        if x < 0 {
            x += ns;
            nbnum -= 1;
        } else if x >= ns {
            x -= ns;
            nbnum += 1;
        }
        if y < 0 {
            y += ns;
            nbnum -= 3;
        } else if y >= ns {
            y -= ns;
            nbnum += 3;
        }
        let f = NB_FACEARRAY[nbnum as usize][face];
        if f < 0 {
            continue;
        }
        let bits = NB_SWAPARRAY[nbnum as usize][face / 4];
        if bits & 1 != 0 {
            x = ns - x - 1;
        }
        if bits & 2 != 0 {
            y = ns - y - 1;
        }
        if bits & 4 != 0 {
            std::mem::swap(&mut x, &mut y);
        }
        let q = xyf_to_nest(f as usize, x as usize, y as usize, nside);
        if q != pix {
            out.push(q);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Pixel reached by rotating about +z by `quarter_turns · 90°`.
pub fn rotate_quarter_turns(pix: usize, nside: usize, quarter_turns: i64) -> usize {
    let (face, ix, iy) = nest_to_xyf(pix, nside);
    let row = face / 4;
    let col = ((face % 4) as i64 + quarter_turns).rem_euclid(4) as usize;
    xyf_to_nest(4 * row + col, ix, iy, nside)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_interleave_round_trips() {
        let nside = 16;
        for pix in 0..npix(nside) {
            let (f, x, y) = nest_to_xyf(pix, nside);
            assert!(f < 12 && x < nside && y < nside);
            assert_eq!(xyf_to_nest(f, x, y, nside), pix);
        }
    }

    #[test]
    fn base_pixels_have_reference_positions() {
        // nside = 1 centres sit at z = ±2/3 (caps) and z = 0 (belt).
        let z: Vec<f64> = (0..12).map(|p| pixel_center(p, 1).z).collect();
        for p in 0..4 {
            assert!((z[p] - 2.0 / 3.0).abs() < 1e-15);
            assert!((z[p + 4]).abs() < 1e-15);
            assert!((z[p + 8] + 2.0 / 3.0).abs() < 1e-15);
        }
        let c0 = pixel_center(0, 1);
        assert!((c0.y.atan2(c0.x) - PI / 4.0).abs() < 1e-14);
        let c4 = pixel_center(4, 1);
        assert!(c4.y.atan2(c4.x).abs() < 1e-14);
    }

    #[test]
    fn centres_are_unit_and_distinct() {
        let nside = 4;
        let pts: Vec<_> = (0..npix(nside)).map(|p| pixel_center(p, nside)).collect();
        for (i, a) in pts.iter().enumerate() {
            assert!((a.norm() - 1.0).abs() < 1e-14);
            for b in &pts[i + 1..] {
                assert!((a - b).norm() > 1e-3);
            }
        }
    }

    fn corner_sharing_oracle(nside: usize) -> Vec<Vec<usize>> {
        let n = npix(nside);
        let corners: Vec<_> = (0..n).map(|p| pixel_corners(p, nside)).collect();
        (0..n)
            .map(|p| {
                (0..n)
                    .filter(|&q| {
                        q != p
                            && corners[p]
                                .iter()
                                .any(|a| corners[q].iter().any(|b| (a - b).norm() < 1e-9))
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn neighbours_match_corner_sharing() {
        for nside in [1, 2, 4, 8] {
            let oracle = corner_sharing_oracle(nside);
            for p in 0..npix(nside) {
                assert_eq!(neighbours(p, nside), oracle[p], "nside {nside} pixel {p}");
            }
        }
    }

    #[test]
    fn children_lie_inside_parent_corners() {
        // Each child centre is closer to its parent's centre than to any
        // other coarse centre.
        let coarse: Vec<_> = (0..npix(2)).map(|p| pixel_center(p, 2)).collect();
        for child in 0..npix(4) {
            let c = pixel_center(child, 4);
            let best = (0..coarse.len())
                .min_by(|&a, &b| (coarse[a] - c).norm().partial_cmp(&(coarse[b] - c).norm()).unwrap())
                .unwrap();
            assert_eq!(best, child / 4);
        }
    }
}
