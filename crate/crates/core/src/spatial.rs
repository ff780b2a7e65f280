//! Exact nearest-neighbour queries over a uniform grid.

use crate::geometry::Vec3;

/// Sets smaller than this are searched by brute force.
pub const BRUTE_FORCE_BELOW: usize = 1000;

pub struct NearestIndex<'a> {
    points: &'a [Vec3],
    grid: Option<Grid>,
}

/// Points bucketed into a dense box of cells, stored as sorted index runs.
struct Grid {
    cell: f64,
    origin: Vec3,
    dims: [usize; 3],
    /// `starts[c]..starts[c + 1]` indexes `ids` for cell `c`.
    starts: Vec<u32>,
    ids: Vec<u32>,
}

fn brute(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Median nearest-neighbour spacing estimated on an evenly strided subset.
fn median_spacing(points: &[Vec3]) -> f64 {
    let stride = (points.len() / 256).max(1);
    let mut spacing: Vec<f64> = (0..points.len())
        .step_by(stride)
        .map(|i| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| (p - points[i]).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| *d > 0.0 && d.is_finite())
        .collect();
    if spacing.is_empty() {
        return 0.0;
    }
    spacing.sort_by(f64::total_cmp);
    spacing[spacing.len() / 2]
}

/// Cell side giving roughly one point per cell over the bounding box,
/// measured in the box's effective dimension.
fn occupancy_cell(points: &[Vec3]) -> f64 {
    let (lo, hi) = points.iter().fold((points[0], points[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let mut ext = [hi.x - lo.x, hi.y - lo.y, hi.z - lo.z];
    ext.sort_by(|a, b| b.total_cmp(a));
    let n = points.len() as f64;
    (1..=3)
        .map(|d| (ext[..d].iter().product::<f64>() / n).powf(1.0 / d as f64))
        .fold(0.0, f64::max)
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let grid = (points.len() >= BRUTE_FORCE_BELOW)
            .then(|| {
                let cell = (2.0 * median_spacing(points)).max(occupancy_cell(points));
                (cell > 0.0).then(|| Grid::build(points, cell))
            })
            .flatten();
        Self { points, grid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of and Euclidean distance to the closest point. Ties go to the
    /// lowest index. Panics on an empty set.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest-neighbour query on an empty set");
        match &self.grid {
            None => brute(self.points, q),
            Some(g) => g.nearest(self.points, q),
        }
    }
}

impl Grid {
    fn key(&self, p: &Vec3) -> [i64; 3] {
        let d = (p - self.origin) / self.cell;
        [d.x.floor() as i64, d.y.floor() as i64, d.z.floor() as i64]
    }

    fn build(points: &[Vec3], cell: f64) -> Self {
        let (lo, hi) = points.iter().fold((points[0], points[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut grid = Self {
            cell,
            origin: lo,
            dims,
            starts: vec![0; dims[0] * dims[1] * dims[2] + 1],
            ids: Vec::with_capacity(points.len()),
        };
        let flat: Vec<usize> = points.iter().map(|p| grid.flat(grid.key(p))).collect();
        for &c in &flat {
            grid.starts[c + 1] += 1;
        }
        for c in 1..grid.starts.len() {
            grid.starts[c] += grid.starts[c - 1];
        }
        let mut next: Vec<u32> = grid.starts[..grid.starts.len() - 1].to_vec();
        grid.ids = vec![0; points.len()];
        for (i, &c) in flat.iter().enumerate() {
            grid.ids[next[c] as usize] = i as u32;
            next[c] += 1;
        }
        grid
    }

    fn flat(&self, k: [i64; 3]) -> usize {
        let [x, y, z] = k.map(|v| v as usize);
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    fn nearest(&self, points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let c = self.key(q);
        let hi = self.dims.map(|d| d as i64 - 1);
        // Shells beyond this radius contain no cell of the box.
        let reach = (0..3).map(|a| c[a].abs().max((hi[a] - c[a]).abs())).max().unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        let visit = |k: [i64; 3], best: &mut (usize, f64)| {
            let f = self.flat(k);
            for &i in &self.ids[self.starts[f] as usize..self.starts[f + 1] as usize] {
                let d = (points[i as usize] - q).norm();
                if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                    *best = (i as usize, d);
                }
            }
        };
        for r in 0..=reach {
            // Cells in the Chebyshev shell of radius r, clipped to the box.
            let range = |a: usize| (c[a] - r).max(0)..=(c[a] + r).min(hi[a]);
            for x in range(0) {
                for y in range(1) {
                    let on_face = (x - c[0]).abs() == r || (y - c[1]).abs() == r;
                    if on_face {
                        for z in range(2) {
                            visit([x, y, z], &mut best);
                        }
                    } else {
                        for z in [c[2] - r, c[2] + r] {
                            if (0..=hi[2]).contains(&z) {
                                visit([x, y, z], &mut best);
                            }
                        }
                    }
                }
            }
            // Anything not yet visited lies at least r cells away.
            if best.1 <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}
