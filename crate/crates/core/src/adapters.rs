//! Adapters that turn triangle meshes and voxel volumes into the
//! query-plus-context point form the field consumes.
//!
//! Meshes are densified by area-weighted surface sampling; the chosen
//! elements (vertices, edge midpoints or face barycenters) are then
//! embedded against the union of elements and samples. Voxel volumes use
//! occupied-voxel centers as points and a fixed L1 receptive field instead
//! of nearest neighbors.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{embed_context_rows, embed_normalized, EmbeddingMatrix, FieldGrid};
use crate::geometry::{Point3, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(i) = vertices.iter().position(|p| !p.is_finite()) {
            return Err(invalid(format!("vertex {i} is not finite")));
        }
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(invalid(format!("face {fi} references a vertex >= {n}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(invalid(format!("face {fi} repeats a vertex")));
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Undirected edges as `(min, max)` pairs, sorted and deduplicated.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        let u = b - a;
        let v = c - a;
        let cross = Point3::raw(u.y * v.z - u.z * v.y, u.z * v.x - u.x * v.z, u.x * v.y - u.y * v.x);
        0.5 * cross.norm()
    }

    pub fn edge_midpoints(&self) -> Vec<Point3> {
        self.edges()
            .into_iter()
            .map(|(a, b)| (self.vertices[a] + self.vertices[b]) * 0.5)
            .collect()
    }

    pub fn face_barycenters(&self) -> Vec<Point3> {
        self.faces
            .iter()
            .map(|f| (self.vertices[f[0]] + self.vertices[f[1]] + self.vertices[f[2]]) * (1.0 / 3.0))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshElementKind {
    Vertex,
    EdgeMidpoint,
    FaceBarycenter,
}

/// Default surface sample count for a mesh with `n_vertices` vertices.
pub fn default_surface_samples(n_vertices: usize) -> usize {
    2048.max(4 * n_vertices)
}

/// Draws `n_samples` points on the mesh surface: faces are picked with
/// probability proportional to area, positions uniformly inside the face.
///
/// Face choice uses one stream of the seeded generator; barycentric
/// coordinates for face `f` come from a separate stream keyed by `f`.
pub fn resample_mesh_surface(mesh: &TriMesh, n_samples: usize, seed: u64) -> Result<PointCloud> {
    if mesh.faces.is_empty() {
        return Err(invalid("mesh has no faces to sample"));
    }
    if n_samples == 0 {
        return Err(invalid("need at least one surface sample"));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(invalid("mesh has zero surface area"));
    }

    let mut picker = ChaCha8Rng::seed_from_u64(seed);
    let mut face_rngs: Vec<Option<ChaCha8Rng>> = vec![None; mesh.faces.len()];
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let u = picker.gen::<f64>() * total;
        let f = cumulative
            .partition_point(|&c| c <= u)
            .min(mesh.faces.len() - 1);
        let rng = face_rngs[f].get_or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(f as u64 + 1);
            r
        });
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
        out.push(a * wa + b * wb + c * wc);
    }
    PointCloud::new(out)
}

pub fn mesh_element_points(mesh: &TriMesh, kind: MeshElementKind) -> Vec<Point3> {
    match kind {
        MeshElementKind::Vertex => mesh.vertices.clone(),
        MeshElementKind::EdgeMidpoint => mesh.edge_midpoints(),
        MeshElementKind::FaceBarycenter => mesh.face_barycenters(),
    }
}

/// One embedding per mesh element of the given kind. Each element point is
/// embedded from its `k` nearest neighbors among all element points plus
/// `n_samples` resampled surface points.
pub fn mesh_element_embeddings(
    grid: &FieldGrid,
    mesh: &TriMesh,
    kind: MeshElementKind,
    n_samples: usize,
    k: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let queries = mesh_element_points(mesh, kind);
    if queries.is_empty() {
        return Err(invalid("mesh has no elements of the requested kind"));
    }
    let samples = resample_mesh_surface(mesh, n_samples, seed)?;
    let nq = queries.len();
    let mut context = queries;
    context.extend_from_slice(samples.points());
    let context = PointCloud::new(context)?;
    let rows: Vec<usize> = (0..nq).collect();
    embed_context_rows(grid, &context, &rows, k)
}

/// Cubic occupancy volume indexed `[ix][iy][iz]`, `iz` fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelVolume {
    size: usize,
    occupancy: Vec<bool>,
}

impl VoxelVolume {
    pub fn new(size: usize, occupancy: Vec<bool>) -> Result<Self> {
        if occupancy.len() != size.pow(3) {
            return Err(invalid(format!(
                "voxel volume of size {size} needs {} cells, got {}",
                size.pow(3),
                occupancy.len()
            )));
        }
        Ok(VoxelVolume { size, occupancy })
    }

    pub fn empty(size: usize) -> Self {
        VoxelVolume {
            size,
            occupancy: vec![false; size.pow(3)],
        }
    }

    pub fn full(size: usize) -> Self {
        VoxelVolume {
            size,
            occupancy: vec![true; size.pow(3)],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.size + iy) * self.size + iz
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.occupancy[self.index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, v: bool) {
        let i = self.index(ix, iy, iz);
        self.occupancy[i] = v;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Center of voxel `i` along one axis, in `[-1, 1]`.
    #[inline]
    pub fn center_coord(&self, i: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / self.size as f64
    }
}

/// Centers of occupied voxels in lexicographic `(ix, iy, iz)` order.
pub fn voxel_virtual_points(vol: &VoxelVolume) -> Vec<Point3> {
    let n = vol.size;
    let mut out = Vec::with_capacity(vol.occupied_count());
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                if vol.get(ix, iy, iz) {
                    out.push(Point3::raw(vol.center_coord(ix), vol.center_coord(iy), vol.center_coord(iz)));
                }
            }
        }
    }
    out
}

pub const DEFAULT_RADIUS_VOXELS: usize = 4;

/// Dense `N×N×N×C` embedding tensor of a voxel volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelEmbeddings {
    size: usize,
    channels: usize,
    values: Vec<f64>,
}

impl VoxelEmbeddings {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> &[f64] {
        let o = ((ix * self.size + iy) * self.size + iz) * self.channels;
        &self.values[o..o + self.channels]
    }

    /// Rows in lexicographic voxel order.
    pub fn into_matrix(self) -> EmbeddingMatrix {
        let rows = self.size.pow(3);
        EmbeddingMatrix::new(rows, self.channels, self.values).expect("shape is consistent")
    }
}

/// Integer offsets inside the L1 ball of the given radius, origin excluded.
fn l1_ball_offsets(radius: i64) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dx in -radius..=radius {
        for dy in -radius..=radius {
            for dz in -radius..=radius {
                let d = dx.abs() + dy.abs() + dz.abs();
                if d > 0 && d <= radius {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Embeds every voxel (occupied or not) from the occupied voxel centers
/// within an L1 radius of `radius_voxels` voxel widths, normalized by that
/// fixed radius. Voxels with no occupied voxel in range get a zero vector.
///
/// Center differences are multiples of the voxel width, so the normalized
/// offset is computed as `integer_offset / radius_voxels`. This equals
/// normalizing the actual centers with scale `2 * radius_voxels / N`, and
/// makes every fully interior voxel see bit-identical input.
pub fn voxel_embeddings(grid: &FieldGrid, vol: &VoxelVolume, radius_voxels: usize) -> Result<VoxelEmbeddings> {
    if radius_voxels == 0 {
        return Err(invalid("voxel radius must be at least 1"));
    }
    let n = vol.size as i64;
    let c = grid.channels();
    let rv = radius_voxels as i64;
    let offsets = l1_ball_offsets(rv);
    let mut values = vec![0.0; vol.size.pow(3) * c];
    values
        .par_chunks_mut(c)
        .enumerate()
        .try_for_each(|(flat, out)| -> Result<()> {
            let flat = flat as i64;
            let (ix, iy, iz) = (flat / (n * n), (flat / n) % n, flat % n);
            let mut any = vol.get(ix as usize, iy as usize, iz as usize);
            let mut normalized = vec![Point3::ORIGIN];
            for &[dx, dy, dz] in &offsets {
                let (x, y, z) = (ix + dx, iy + dy, iz + dz);
                if x < 0 || y < 0 || z < 0 || x >= n || y >= n || z >= n {
                    continue;
                }
                if vol.get(x as usize, y as usize, z as usize) {
                    any = true;
                    normalized.push(Point3::raw(
                        dx as f64 / rv as f64,
                        dy as f64 / rv as f64,
                        dz as f64 / rv as f64,
                    ));
                }
            }
            if any {
                let (e, _) = embed_normalized(grid, &normalized)?;
                out.copy_from_slice(&e);
            }
            Ok(())
        })?;
    Ok(VoxelEmbeddings {
        size: vol.size,
        channels: c,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{embed_cloud, init_grid, InitScheme};
    use crate::geometry::adaptive_k;

    fn tetra() -> TriMesh {
        TriMesh::new(
            vec![
                Point3::raw(0., 0., 0.),
                Point3::raw(1., 0., 0.),
                Point3::raw(0., 1., 0.),
                Point3::raw(0., 0., 1.),
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn mesh_validation_and_edges() {
        assert!(TriMesh::new(vec![Point3::ORIGIN; 2], vec![[0, 1, 2]]).is_err());
        assert!(TriMesh::new(vec![Point3::ORIGIN; 3], vec![[0, 1, 1]]).is_err());
        assert_eq!(
            tetra().edges(),
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        );
    }

    #[test]
    fn samples_stay_inside_single_triangle() {
        let m = TriMesh::new(
            vec![Point3::raw(0., 0., 0.), Point3::raw(2., 0., 0.), Point3::raw(0., 1., 0.)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let s = resample_mesh_surface(&m, 500, 3).unwrap();
        for p in s.points() {
            // Barycentric coordinates for this right triangle.
            let (b, c) = (p.x / 2.0, p.y);
            let a = 1.0 - b - c;
            assert!(a >= -1e-12 && b >= -1e-12 && c >= -1e-12 && p.z == 0.0);
        }
        assert_eq!(s, resample_mesh_surface(&m, 500, 3).unwrap());
        assert_ne!(s, resample_mesh_surface(&m, 500, 4).unwrap());
    }

    #[test]
    fn sampling_follows_area() {
        // Areas 1 and 3; expect 30000 of 40000 samples in the second,
        // binomial sigma = sqrt(40000 * 0.75 * 0.25) ~ 87.
        let m = TriMesh::new(
            vec![
                Point3::raw(0., 0., 0.),
                Point3::raw(2., 0., 0.),
                Point3::raw(0., 1., 0.),
                Point3::raw(10., 0., 0.),
                Point3::raw(16., 0., 0.),
                Point3::raw(10., 1., 0.),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        assert!((m.face_area(0) - 1.0).abs() < 1e-12 && (m.face_area(1) - 3.0).abs() < 1e-12);
        let s = resample_mesh_surface(&m, 40000, 11).unwrap();
        let second = s.points().iter().filter(|p| p.x >= 10.0).count();
        assert!((29500..=30500).contains(&second), "{second}");
    }

    #[test]
    fn zero_area_mesh_rejected() {
        let m = TriMesh::new(
            vec![Point3::raw(0., 0., 0.), Point3::raw(1., 0., 0.), Point3::raw(2., 0., 0.)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(resample_mesh_surface(&m, 10, 0).is_err());
        assert!(resample_mesh_surface(&tetra(), 0, 0).is_err());
    }

    #[test]
    fn element_embedding_shapes_and_constant_grid() {
        let g = FieldGrid::constant(4, 3, &[1.5, -2.0, 0.0]).unwrap();
        let m = tetra();
        let v = mesh_element_embeddings(&g, &m, MeshElementKind::Vertex, 64, 8, 1).unwrap();
        assert_eq!(v.rows(), 4);
        let f = mesh_element_embeddings(&g, &m, MeshElementKind::FaceBarycenter, 64, 8, 1).unwrap();
        assert_eq!(f.rows(), 4);
        let e = mesh_element_embeddings(&g, &m, MeshElementKind::EdgeMidpoint, 64, 8, 1).unwrap();
        assert_eq!(e.rows(), 6);
        for row in v.iter_rows().chain(f.iter_rows()).chain(e.iter_rows()) {
            assert!((row[0] - 1.5).abs() < 1e-14 && (row[1] + 2.0).abs() < 1e-14 && row[2] == 0.0);
        }
    }

    #[test]
    fn edge_embeddings_match_concatenated_cloud() {
        let g = init_grid(6, 4, InitScheme::Uniform(1.0), 2).unwrap();
        let m = tetra();
        let got = mesh_element_embeddings(&g, &m, MeshElementKind::EdgeMidpoint, 256, 8, 9).unwrap();

        let mut pts = m.edge_midpoints();
        pts.extend_from_slice(resample_mesh_surface(&m, 256, 9).unwrap().points());
        let full = embed_cloud(&g, &PointCloud::new(pts).unwrap(), 8).unwrap();
        for i in 0..6 {
            assert_eq!(got.row(i), full.row(i));
        }
    }

    #[test]
    fn vertex_relabeling_permutes_rows() {
        let g = init_grid(6, 4, InitScheme::Uniform(1.0), 2).unwrap();
        let m = tetra();
        // new index of old vertex i is perm[i]
        let perm = [2usize, 0, 3, 1];
        let mut verts = vec![Point3::ORIGIN; 4];
        for (old, &new) in perm.iter().enumerate() {
            verts[new] = m.vertices()[old];
        }
        let faces = m.faces().iter().map(|f| f.map(|v| perm[v])).collect();
        let relabeled = TriMesh::new(verts, faces).unwrap();
        let k = adaptive_k(4 + 300, 64, 2048).unwrap();
        let a = mesh_element_embeddings(&g, &m, MeshElementKind::Vertex, 300, k, 5).unwrap();
        let b = mesh_element_embeddings(&g, &relabeled, MeshElementKind::Vertex, 300, k, 5).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            for (x, y) in a.row(old).iter().zip(b.row(new)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn virtual_points() {
        assert!(voxel_virtual_points(&VoxelVolume::empty(5)).is_empty());
        let mut v = VoxelVolume::empty(2);
        v.set(0, 0, 0, true);
        assert_eq!(voxel_virtual_points(&v), vec![Point3::raw(-0.5, -0.5, -0.5)]);
        let full = voxel_virtual_points(&VoxelVolume::full(4));
        assert_eq!(full.len(), 64);
        assert_eq!(full[1], Point3::raw(-0.75, -0.75, -0.25));
        assert!(VoxelVolume::new(3, vec![false; 26]).is_err());
    }

    #[test]
    fn voxel_zero_and_interior_rules() {
        let g = init_grid(8, 6, InitScheme::Uniform(1.0), 4).unwrap();
        let e = voxel_embeddings(&g, &VoxelVolume::empty(6), 2).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));

        let n = 12;
        let r = 3;
        let e = voxel_embeddings(&g, &VoxelVolume::full(n), r).unwrap();
        let reference = e.get(r, r, r).to_vec();
        for ix in r..n - r {
            for iy in r..n - r {
                for iz in r..n - r {
                    assert_eq!(e.get(ix, iy, iz), &reference[..]);
                }
            }
        }
        assert_ne!(e.get(0, 0, 0), &reference[..]);
        assert!(voxel_embeddings(&g, &VoxelVolume::full(2), 0).is_err());
    }

    #[test]
    fn voxel_translation_equivariance() {
        let g = init_grid(6, 3, InitScheme::Uniform(1.0), 8).unwrap();
        let n = 14;
        let mut a = VoxelVolume::empty(n);
        let mut b = VoxelVolume::empty(n);
        let cells = [(4, 5, 6), (5, 5, 6), (6, 7, 5), (5, 6, 6), (4, 4, 4)];
        for &(x, y, z) in &cells {
            a.set(x, y, z, true);
            b.set(x + 1, y, z, true);
        }
        let r = 2;
        let ea = voxel_embeddings(&g, &a, r).unwrap();
        let eb = voxel_embeddings(&g, &b, r).unwrap();
        for ix in r..n - r - 1 {
            for iy in 0..n {
                for iz in 0..n {
                    assert_eq!(ea.get(ix, iy, iz), eb.get(ix + 1, iy, iz));
                }
            }
        }
    }

    #[test]
    fn voxel_rotation_equivariance_with_constant_grid() {
        let g = FieldGrid::constant(4, 2, &[0.7, -0.1]).unwrap();
        let n = 8;
        let mut a = VoxelVolume::empty(n);
        let mut rot = VoxelVolume::empty(n);
        for &(x, y, z) in &[(1, 2, 3), (6, 6, 0), (3, 3, 3)] {
            a.set(x, y, z, true);
            // 90 degrees about z: (x, y) -> (n-1-y, x)
            rot.set(n - 1 - y, x, z, true);
        }
        let ea = voxel_embeddings(&g, &a, 2).unwrap();
        let er = voxel_embeddings(&g, &rot, 2).unwrap();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    assert_eq!(ea.get(x, y, z), er.get(n - 1 - y, x, z));
                }
            }
        }
    }
}
