//! Structured desk-scale meshes.
//!
//! Two layouts are supported: a 1D wall-normal channel column (one cell wide,
//! fully developed in x) and a 2D Cartesian box whose obstacles are realised by
//! blanking cells. Cells are stored x-major, `idx = i * ny + j`, so the
//! wall-normal index runs fastest and the banded Jacobians stay narrow.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryTag {
    Wall,
    Inlet,
    Outlet,
    Periodic,
    Symmetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbor {
    Cell(usize),
    Boundary(BoundaryTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    East,
    West,
    North,
    South,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::East,
        Direction::West,
        Direction::North,
        Direction::South,
    ];

    pub fn opposite(self) -> Direction {
        match self {
            Direction::East => Direction::West,
            Direction::West => Direction::East,
            Direction::North => Direction::South,
            Direction::South => Direction::North,
        }
    }

    /// Outward unit normal.
    pub fn normal(self) -> [f64; 2] {
        match self {
            Direction::East => [1.0, 0.0],
            Direction::West => [-1.0, 0.0],
            Direction::North => [0.0, 1.0],
            Direction::South => [0.0, -1.0],
        }
    }

    pub fn axis(self) -> usize {
        match self {
            Direction::East | Direction::West => 0,
            Direction::North | Direction::South => 1,
        }
    }

    pub(crate) fn slot(self) -> usize {
        match self {
            Direction::East => 0,
            Direction::West => 1,
            Direction::North => 2,
            Direction::South => 3,
        }
    }
}

/// How a boundary face value is reconstructed when taking gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaceRule {
    Dirichlet(f64),
    ZeroGradient,
    /// Linear extrapolation through the cell and its opposite neighbour,
    /// which turns the Green-Gauss sum into a one-sided difference.
    Extrapolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    dim: usize,
    nx: usize,
    ny: usize,
    x_faces: Vec<f64>,
    y_faces: Vec<f64>,
    x_centers: Vec<f64>,
    y_centers: Vec<f64>,
    blanked: Vec<bool>,
    wall_distance: Vec<f64>,
    #[serde(skip)]
    neighbors: Vec<[Option<Neighbor>; 4]>,
}

fn check_finite_positive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return invalid(format!("{name} must be finite and positive, got {v}"));
    }
    Ok(())
}

fn centers(faces: &[f64]) -> Vec<f64> {
    faces.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Geometric face distribution from 0 to `length` with the first (smallest)
/// spacing at 0.
pub fn geometric_faces(n: usize, ratio: f64, length: f64) -> Vec<f64> {
    let first = first_spacing(n, ratio, length);
    let mut faces = Vec::with_capacity(n + 1);
    faces.push(0.0);
    let mut h = first;
    let mut y = 0.0;
    for _ in 0..n - 1 {
        y += h;
        faces.push(y);
        h *= ratio;
    }
    faces.push(length);
    faces
}

/// Wall-adjacent spacing of a geometric distribution: `L (r - 1) / (r^n - 1)`.
pub fn first_spacing(n: usize, ratio: f64, length: f64) -> f64 {
    if ratio == 1.0 {
        length / n as f64
    } else {
        length * (ratio - 1.0) / (ratio.powi(n as i32) - 1.0)
    }
}

impl Mesh {
    /// 1D wall-normal column from the wall (y = 0) to the channel centreline.
    pub fn channel_1d(n_cells: usize, stretch_ratio: f64, half_height: f64) -> Result<Mesh> {
        if n_cells < 8 {
            return invalid(format!("channel needs at least 8 cells, got {n_cells}"));
        }
        check_finite_positive("half_height", half_height)?;
        if !stretch_ratio.is_finite() || stretch_ratio < 1.0 {
            return invalid(format!("stretch_ratio must be >= 1, got {stretch_ratio}"));
        }
        let y_faces = geometric_faces(n_cells, stretch_ratio, half_height);
        let x_faces = vec![0.0, 1.0];
        let mut mesh = Mesh {
            dim: 1,
            nx: 1,
            ny: n_cells,
            x_centers: centers(&x_faces),
            y_centers: centers(&y_faces),
            x_faces,
            y_faces,
            blanked: vec![false; n_cells],
            wall_distance: Vec::new(),
            neighbors: Vec::new(),
        };
        mesh.finish();
        Ok(mesh)
    }

    /// 2D channel with a backward-facing step realised by blanked cells.
    ///
    /// The blanked block spans the first quarter of the domain length and
    /// `step_height_fraction * domain_height` in y; cells are blanked when
    /// their centre lies inside it.
    pub fn step_2d(
        nx: usize,
        ny: usize,
        step_height_fraction: f64,
        domain_length: f64,
        domain_height: f64,
    ) -> Result<Mesh> {
        if nx < 16 || ny < 16 {
            return invalid(format!("step mesh needs nx, ny >= 16, got {nx} x {ny}"));
        }
        check_finite_positive("domain_length", domain_length)?;
        check_finite_positive("domain_height", domain_height)?;
        if !step_height_fraction.is_finite()
            || step_height_fraction <= 0.0
            || step_height_fraction >= 1.0
        {
            return invalid(format!(
                "step_height_fraction must lie in (0, 1), got {step_height_fraction}"
            ));
        }
        let step_length = 0.25 * domain_length;
        let step_height = step_height_fraction * domain_height;
        Self::cartesian_2d(nx, ny, domain_length, domain_height, |x, y| {
            x < step_length && y < step_height
        })
    }

    /// Cartesian box with walls top and bottom, inlet on the left and outlet
    /// on the right. `blank(x, y)` selects obstacle cells by centre.
    pub fn cartesian_2d(
        nx: usize,
        ny: usize,
        length: f64,
        height: f64,
        blank: impl Fn(f64, f64) -> bool,
    ) -> Result<Mesh> {
        if nx < 2 || ny < 2 {
            return invalid("cartesian mesh needs at least 2 cells per direction");
        }
        check_finite_positive("length", length)?;
        check_finite_positive("height", height)?;
        let x_faces = geometric_faces(nx, 1.0, length);
        let y_faces = geometric_faces(ny, 1.0, height);
        let x_centers = centers(&x_faces);
        let y_centers = centers(&y_faces);
        let mut blanked = vec![false; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                blanked[i * ny + j] = blank(x_centers[i], y_centers[j]);
            }
        }
        if blanked.iter().all(|&b| b) {
            return invalid("every cell is blanked");
        }
        let mut mesh = Mesh {
            dim: 2,
            nx,
            ny,
            x_faces,
            y_faces,
            x_centers,
            y_centers,
            blanked,
            wall_distance: Vec::new(),
            neighbors: Vec::new(),
        };
        mesh.finish();
        Ok(mesh)
    }

    /// Rebuilds derived connectivity and wall distance (needed after
    /// deserialisation).
    pub fn finish(&mut self) {
        self.neighbors = (0..self.n_cells())
            .map(|c| {
                let mut slots = [None; 4];
                if !self.blanked[c] {
                    for d in Direction::ALL {
                        slots[d.slot()] = Some(self.compute_neighbor(c, d));
                    }
                }
                slots
            })
            .collect();
        self.wall_distance = self.compute_wall_distance();
    }

    fn compute_neighbor(&self, c: usize, d: Direction) -> Neighbor {
        let (i, j) = self.ij(c);
        if self.dim == 1 {
            return match d {
                Direction::East | Direction::West => Neighbor::Boundary(BoundaryTag::Periodic),
                Direction::South if j == 0 => Neighbor::Boundary(BoundaryTag::Wall),
                Direction::North if j + 1 == self.ny => Neighbor::Boundary(BoundaryTag::Symmetry),
                Direction::South => Neighbor::Cell(c - 1),
                Direction::North => Neighbor::Cell(c + 1),
            };
        }
        let (ni, nj) = match d {
            Direction::East => (i as isize + 1, j as isize),
            Direction::West => (i as isize - 1, j as isize),
            Direction::North => (i as isize, j as isize + 1),
            Direction::South => (i as isize, j as isize - 1),
        };
        if ni < 0 {
            return Neighbor::Boundary(BoundaryTag::Inlet);
        }
        if ni as usize >= self.nx {
            return Neighbor::Boundary(BoundaryTag::Outlet);
        }
        if nj < 0 || nj as usize >= self.ny {
            return Neighbor::Boundary(BoundaryTag::Wall);
        }
        let n = self.idx(ni as usize, nj as usize);
        if self.blanked[n] {
            Neighbor::Boundary(BoundaryTag::Wall)
        } else {
            Neighbor::Cell(n)
        }
    }

    fn wall_face_centroids(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for c in 0..self.n_cells() {
            if self.blanked[c] {
                continue;
            }
            for d in Direction::ALL {
                if self.neighbor(c, d) == Neighbor::Boundary(BoundaryTag::Wall) {
                    out.push(self.face_center(c, d));
                }
            }
        }
        out
    }

    fn compute_wall_distance(&self) -> Vec<f64> {
        let walls = self.wall_face_centroids();
        (0..self.n_cells())
            .map(|c| {
                if self.blanked[c] {
                    return 0.0;
                }
                let p = self.center(c);
                walls
                    .iter()
                    .map(|w| {
                        let dy = p[1] - w[1];
                        if self.dim == 1 {
                            dy.abs()
                        } else {
                            let dx = p[0] - w[0];
                            (dx * dx + dy * dy).sqrt()
                        }
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Number of cells that carry unknowns.
    pub fn n_active(&self) -> usize {
        self.blanked.iter().filter(|&&b| !b).count()
    }

    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn ij(&self, c: usize) -> (usize, usize) {
        (c / self.ny, c % self.ny)
    }

    pub fn x_faces(&self) -> &[f64] {
        &self.x_faces
    }

    pub fn y_faces(&self) -> &[f64] {
        &self.y_faces
    }

    pub fn y_centers(&self) -> &[f64] {
        &self.y_centers
    }

    pub fn x_centers(&self) -> &[f64] {
        &self.x_centers
    }

    pub fn is_blanked(&self, c: usize) -> bool {
        self.blanked[c]
    }

    pub fn blanked(&self) -> &[bool] {
        &self.blanked
    }

    pub fn wall_distance(&self) -> &[f64] {
        &self.wall_distance
    }

    pub fn center(&self, c: usize) -> [f64; 2] {
        let (i, j) = self.ij(c);
        [self.x_centers[i], self.y_centers[j]]
    }

    pub fn dx(&self, c: usize) -> f64 {
        let (i, _) = self.ij(c);
        self.x_faces[i + 1] - self.x_faces[i]
    }

    pub fn dy(&self, c: usize) -> f64 {
        let (_, j) = self.ij(c);
        self.y_faces[j + 1] - self.y_faces[j]
    }

    /// Spacing along the axis normal to a face of direction `d`.
    pub fn spacing(&self, c: usize, d: Direction) -> f64 {
        match d.axis() {
            0 => self.dx(c),
            _ => self.dy(c),
        }
    }

    pub fn volume(&self, c: usize) -> f64 {
        self.dx(c) * self.dy(c)
    }

    pub fn face_area(&self, c: usize, d: Direction) -> f64 {
        match d.axis() {
            0 => self.dy(c),
            _ => self.dx(c),
        }
    }

    pub fn face_center(&self, c: usize, d: Direction) -> [f64; 2] {
        let (i, j) = self.ij(c);
        let [x, y] = self.center(c);
        match d {
            Direction::East => [self.x_faces[i + 1], y],
            Direction::West => [self.x_faces[i], y],
            Direction::North => [x, self.y_faces[j + 1]],
            Direction::South => [x, self.y_faces[j]],
        }
    }

    /// Neighbour across the face of cell `c` in direction `d`. Blanked cells
    /// have no faces; asking for one is a logic error.
    pub fn neighbor(&self, c: usize, d: Direction) -> Neighbor {
        self.neighbors[c][d.slot()].expect("blanked cells have no faces")
    }

    /// Distance between cell centre and face centre along the face normal.
    pub fn half_spacing(&self, c: usize, d: Direction) -> f64 {
        0.5 * self.spacing(c, d)
    }

    /// Centre-to-centre distance across an interior face.
    pub fn center_distance(&self, a: usize, b: usize, d: Direction) -> f64 {
        let pa = self.center(a);
        let pb = self.center(b);
        (pb[d.axis()] - pa[d.axis()]).abs()
    }

    /// Cells adjacent to at least one wall face.
    pub fn is_wall_adjacent(&self, c: usize) -> bool {
        !self.blanked[c]
            && Direction::ALL
                .iter()
                .any(|&d| self.neighbor(c, d) == Neighbor::Boundary(BoundaryTag::Wall))
    }

    /// Sum of outward face-area vectors of a cell (zero for closed cells).
    pub fn face_area_balance(&self, c: usize) -> [f64; 2] {
        let mut s = [0.0; 2];
        for d in Direction::ALL {
            let n = d.normal();
            let a = self.face_area(c, d);
            s[0] += n[0] * a;
            s[1] += n[1] * a;
        }
        s
    }

    /// Gradient with one-sided (extrapolated) faces on every boundary.
    pub fn gradient(&self, field: &[f64]) -> Result<Vec<[f64; 2]>> {
        self.gradient_with(field, |_, _| FaceRule::Extrapolate)
    }

    /// Green-Gauss gradient on the Cartesian faces. Interior face values are
    /// linear interpolants of the adjacent centres, so linear fields are
    /// differentiated exactly; boundary faces follow `rule`. Periodic faces
    /// of the 1D channel carry no x-variation.
    pub fn gradient_with(
        &self,
        field: &[f64],
        rule: impl Fn(BoundaryTag, Direction) -> FaceRule,
    ) -> Result<Vec<[f64; 2]>> {
        self.gradient_cellwise(field, |_, tag, d| rule(tag, d))
    }

    /// As [`Mesh::gradient_with`] with a boundary rule that may depend on
    /// the owning cell (e.g. a non-uniform inlet profile).
    pub fn gradient_cellwise(
        &self,
        field: &[f64],
        rule: impl Fn(usize, BoundaryTag, Direction) -> FaceRule,
    ) -> Result<Vec<[f64; 2]>> {
        if field.len() != self.n_cells() {
            return invalid(format!(
                "field has {} entries, mesh has {} cells",
                field.len(),
                self.n_cells()
            ));
        }
        let mut out = vec![[0.0; 2]; self.n_cells()];
        for (c, g) in out.iter_mut().enumerate() {
            if self.blanked[c] {
                continue;
            }
            for (axis, (plus, minus)) in [
                (0, (Direction::East, Direction::West)),
                (1, (Direction::North, Direction::South)),
            ] {
                let hi = self.face_value(field, c, plus, &rule);
                let lo = self.face_value(field, c, minus, &rule);
                g[axis] = match (hi, lo) {
                    (Some(h), Some(l)) => (h - l) / self.spacing(c, plus),
                    _ => 0.0,
                };
            }
        }
        Ok(out)
    }

    fn face_value(
        &self,
        field: &[f64],
        c: usize,
        d: Direction,
        rule: &impl Fn(usize, BoundaryTag, Direction) -> FaceRule,
    ) -> Option<f64> {
        let axis = d.axis();
        let xc = self.center(c)[axis];
        let xf = self.face_center(c, d)[axis];
        match self.neighbor(c, d) {
            Neighbor::Cell(n) => {
                let xn = self.center(n)[axis];
                Some(field[c] + (field[n] - field[c]) * (xf - xc) / (xn - xc))
            }
            Neighbor::Boundary(BoundaryTag::Periodic) => None,
            Neighbor::Boundary(tag) => match rule(c, tag, d) {
                FaceRule::Dirichlet(v) => Some(v),
                FaceRule::ZeroGradient => Some(field[c]),
                FaceRule::Extrapolate => {
                    let o = d.opposite();
                    let slope = match self.neighbor(c, o) {
                        Neighbor::Cell(n) => {
                            let xn = self.center(n)[axis];
                            (field[c] - field[n]) / (xc - xn)
                        }
                        Neighbor::Boundary(otag) => match rule(c, otag, o) {
                            FaceRule::Dirichlet(v) => {
                                let xo = self.face_center(c, o)[axis];
                                (field[c] - v) / (xc - xo)
                            }
                            _ => 0.0,
                        },
                    };
                    Some(field[c] + slope * (xf - xc))
                }
            },
        }
    }

    /// Boundary faces as (cell, direction, tag) triples.
    pub fn boundary_faces(&self) -> Vec<(usize, Direction, BoundaryTag)> {
        let mut out = Vec::new();
        for c in 0..self.n_cells() {
            if self.blanked[c] {
                continue;
            }
            for d in Direction::ALL {
                if let Neighbor::Boundary(tag) = self.neighbor(c, d) {
                    out.push((c, d, tag));
                }
            }
        }
        out
    }
}
