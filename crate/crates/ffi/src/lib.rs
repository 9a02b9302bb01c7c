//! C ABI for the `rasf` shape-field library.
//!
//! Grids are opaque heap handles created by `rasf_grid_new` /
//! `rasf_grid_read` and released with `rasf_grid_free`. Every fallible call
//! returns a [`RasfStatus`]; on failure a description is available from
//! `rasf_last_error_message` on the same thread until the next failing call.
//! Output buffers are caller-allocated and their length is passed in
//! elements, never bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rasf::adapters::{voxel_embeddings, VoxelVolume};
use rasf::field::{embed_cloud, init_grid, sample_trilinear, FieldGrid, InitScheme};
use rasf::geometry::{adaptive_k, Point3, PointCloud, DEFAULT_BASE_K, DEFAULT_BASE_N};
use rasf::io::{self, Precision};
use rasf::Error;

/// Result code of every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfDomain = 3,
    InvalidState = 4,
    Parse = 5,
    Format = 6,
    Io = 7,
    /// The output buffer length does not match the result size.
    BufferSize = 8,
    /// A Rust panic was caught at the boundary; the handle may be unusable.
    Internal = 9,
}

/// Opaque feature grid.
pub struct RasfGrid {
    inner: FieldGrid,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> RasfStatus {
    match err {
        Error::InvalidArgument(_) => RasfStatus::InvalidArgument,
        Error::OutOfDomain(_) => RasfStatus::OutOfDomain,
        Error::InvalidState(_) => RasfStatus::InvalidState,
        Error::Parse { .. } => RasfStatus::Parse,
        Error::Format(_) => RasfStatus::Format,
        Error::Io(_) => RasfStatus::Io,
    }
}

struct Fail(RasfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RasfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RasfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RasfStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RasfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn grid_ref<'a>(grid: *const RasfGrid) -> Result<&'a FieldGrid, Fail> {
    grid.as_ref().map(|g| &g.inner).ok_or_else(|| null("grid"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(RasfStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_slice<'a>(out: *mut f64, out_len: usize, needed: usize) -> Result<&'a mut [f64], Fail> {
    if out_len != needed {
        return Err(Fail(
            RasfStatus::BufferSize,
            format!("output buffer holds {out_len} values, result has {needed}"),
        ));
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(out, out_len))
}

fn give(grid: FieldGrid, out: *mut *mut RasfGrid) {
    unsafe { *out = Box::into_raw(Box::new(RasfGrid { inner: grid })) };
}

/// Message of the last failing call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rasf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rasf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a `resolution³ × channels` grid with values uniform in
/// `[-init_scale, init_scale]`, drawn from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn rasf_grid_new(
    resolution: usize,
    channels: usize,
    init_scale: f64,
    seed: u64,
    out: *mut *mut RasfGrid,
) -> RasfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        give(init_grid(resolution, channels, InitScheme::Uniform(init_scale), seed)?, out);
        Ok(())
    })
}

/// Reads a grid file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rasf_grid_read(path: *const c_char, out: *mut *mut RasfGrid) -> RasfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        give(io::read_grid(&path)?, out);
        Ok(())
    })
}

/// Writes a grid file with 4- (f32) or 8-byte (f64) values.
///
/// # Safety
/// `grid` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rasf_grid_write(grid: *const RasfGrid, path: *const c_char, precision_bytes: u8) -> RasfStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        let path = path_arg(path)?;
        let precision = match precision_bytes {
            4 => Precision::F32,
            8 => Precision::F64,
            p => return Err(Fail(RasfStatus::InvalidArgument, format!("precision must be 4 or 8, got {p}"))),
        };
        io::write_grid(&path, g, precision)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rasf_grid_free(grid: *mut RasfGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Grid resolution, or 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rasf_grid_resolution(grid: *const RasfGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.inner.resolution())
}

/// Channel count, or 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rasf_grid_channels(grid: *const RasfGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.inner.channels())
}

/// Trilinear sample at `xyz` into `out[channels]`.
///
/// # Safety
/// `xyz` must point to 3 doubles, `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rasf_grid_sample(
    grid: *const RasfGrid,
    xyz: *const f64,
    out: *mut f64,
    out_len: usize,
) -> RasfStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        if xyz.is_null() {
            return Err(null("xyz"));
        }
        let q = std::slice::from_raw_parts(xyz, 3);
        let dst = out_slice(out, out_len, g.channels())?;
        let v = sample_trilinear(g, Point3::new(q[0], q[1], q[2])?)?;
        dst.copy_from_slice(&v);
        Ok(())
    })
}

/// Embeds every point of a cloud given as `n_points` xyz triples. `k` is
/// the neighbor count including the point itself; 0 picks it from the
/// cloud size. `out` receives `n_points × channels` values, row-major.
///
/// # Safety
/// `points` must point to `3 * n_points` doubles and `out` to `out_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rasf_embed_cloud(
    grid: *const RasfGrid,
    points: *const f64,
    n_points: usize,
    k: usize,
    out: *mut f64,
    out_len: usize,
) -> RasfStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        if points.is_null() {
            return Err(null("points"));
        }
        if n_points == 0 {
            return Err(Fail(RasfStatus::InvalidArgument, "cloud is empty".into()));
        }
        let needed = n_points
            .checked_mul(g.channels())
            .ok_or_else(|| Fail(RasfStatus::InvalidArgument, "output size overflows".into()))?;
        let dst = out_slice(out, out_len, needed)?;
        let coords = std::slice::from_raw_parts(points, 3 * n_points);
        let pts = coords
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect::<rasf::Result<Vec<_>>>()?;
        let cloud = PointCloud::new(pts)?;
        let k = if k == 0 { adaptive_k(n_points, DEFAULT_BASE_K, DEFAULT_BASE_N)? } else { k };
        let m = embed_cloud(g, &cloud, k)?;
        dst.copy_from_slice(m.values());
        Ok(())
    })
}

/// Embeds every voxel of a `size³` volume. `occupancy` holds one byte per
/// voxel in `[ix][iy][iz]` order (`iz` fastest), nonzero meaning occupied.
/// `out` receives `size³ × channels` values in the same voxel order.
///
/// # Safety
/// `occupancy` must point to `size³` bytes and `out` to `out_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn rasf_embed_voxels(
    grid: *const RasfGrid,
    occupancy: *const u8,
    size: usize,
    radius_voxels: usize,
    out: *mut f64,
    out_len: usize,
) -> RasfStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        if occupancy.is_null() {
            return Err(null("occupancy"));
        }
        let cells = size
            .checked_pow(3)
            .ok_or_else(|| Fail(RasfStatus::InvalidArgument, "volume size overflows".into()))?;
        let needed = cells
            .checked_mul(g.channels())
            .ok_or_else(|| Fail(RasfStatus::InvalidArgument, "output size overflows".into()))?;
        let dst = out_slice(out, out_len, needed)?;
        let occ = std::slice::from_raw_parts(occupancy, cells).iter().map(|&b| b != 0).collect();
        let vol = VoxelVolume::new(size, occ)?;
        let e = voxel_embeddings(g, &vol, radius_voxels)?;
        dst.copy_from_slice(e.values());
        Ok(())
    })
}
