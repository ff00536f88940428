//! Dense raster data types and resampling primitives.
//!
//! A [`Grid`] is an `H x W x C` raster of `f32` values stored row-major in
//! `(row, column, channel)` order. It carries images, flow fields, depth
//! maps, feature maps, cue stacks and masks throughout the crate. Grids are
//! immutable after construction and every public operation keeps all values
//! finite.
//!
//! Interpolation convention (used everywhere in this crate): a pixel covers
//! a unit square and its sample sits at its centre, i.e. output sample `j`
//! of an axis resampled from `src` to `dst` elements reads source coordinate
//! `(j + 0.5) * src / dst - 0.5`, clamped to the valid range. Same-size
//! resampling is therefore exact.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic tag of the raster file format.
pub const RASTER_MAGIC: [u8; 4] = *b"LGRD";
/// Current raster format version.
pub const RASTER_VERSION: u32 = 1;
/// dtype tag for little-endian `f32` payloads (the only supported dtype).
pub const RASTER_DTYPE_F32: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid dims {h}x{w}x{c}: all must be >= 1")]
    InvalidDims { h: usize, w: usize, c: usize },
    #[error("data length {got} does not match {h}x{w}x{c} = {want}")]
    DataLength { h: usize, w: usize, c: usize, got: usize, want: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("crop window (top={top}, left={left}, {ch}x{cw}) exceeds source {h}x{w}")]
    CropOutOfBounds { top: usize, left: usize, ch: usize, cw: usize, h: usize, w: usize },
    #[error("crop aspect {ch}x{cw} does not match output aspect {oh}x{ow} within 1 pixel")]
    CropAspect { ch: usize, cw: usize, oh: usize, ow: usize },
    #[error("axis {axis:?} has extent {len}, need at least 2 for a gradient")]
    AxisTooSmall { axis: Axis2, len: usize },
    #[error("resample target {oh}x{ow} invalid: dims must be >= 1")]
    BadResampleTarget { oh: usize, ow: usize },
    #[error("raster io: {0}")]
    Io(#[from] std::io::Error),
    #[error("raster format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },
}

/// Spatial axis selector for gradient operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis2 {
    /// Horizontal (along columns).
    X,
    /// Vertical (along rows).
    Y,
}

/// Dense `H x W x C` raster of `f32` values, row-major `(row, col, channel)`.
#[derive(Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}x{}x{})", self.h, self.w, self.c)
    }
}

impl Grid {
    /// Builds a grid from raw data, validating shape and finiteness.
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self, GridError> {
        if h == 0 || w == 0 || c == 0 {
            return Err(GridError::InvalidDims { h, w, c });
        }
        let want = h * w * c;
        if data.len() != want {
            return Err(GridError::DataLength { h, w, c, got: data.len(), want });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Grid { h, w, c, data })
    }

    /// Constant-valued grid.
    pub fn constant(h: usize, w: usize, c: usize, value: f32) -> Result<Self, GridError> {
        Self::from_vec(h, w, c, vec![value; h * w * c])
    }

    /// Fills a grid from a per-pixel closure `(row, col, channel) -> value`.
    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::from_vec(h, w, c, data)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    /// Number of pixels `H * W`.
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch]
    }

    /// Per-channel `(min, max)` over the whole grid.
    pub fn channel_bounds(&self) -> Vec<(f32, f32)> {
        let mut bounds = vec![(f32::INFINITY, f32::NEG_INFINITY); self.c];
        for px in self.data.chunks_exact(self.c) {
            for (b, v) in bounds.iter_mut().zip(px) {
                b.0 = b.0.min(*v);
                b.1 = b.1.max(*v);
            }
        }
        bounds
    }

    /// Concatenates grids along the channel axis. All inputs must share the
    /// spatial size.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid, GridError> {
        assert!(!parts.is_empty());
        let (h, w) = (parts[0].h, parts[0].w);
        for p in parts {
            if p.h != h || p.w != w {
                return Err(GridError::CropOutOfBounds {
                    top: 0,
                    left: 0,
                    ch: p.h,
                    cw: p.w,
                    h,
                    w,
                });
            }
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for p in parts {
                    let base = (y * p.w + x) * p.c;
                    data.extend_from_slice(&p.data[base..base + p.c]);
                }
            }
        }
        Grid::from_vec(h, w, c, data)
    }

    /// Extracts a subset of channels, in the given order.
    pub fn select_channels(&self, chans: &[usize]) -> Grid {
        assert!(chans.iter().all(|&ch| ch < self.c));
        let mut data = Vec::with_capacity(self.h * self.w * chans.len());
        for px in self.data.chunks_exact(self.c) {
            for &ch in chans {
                data.push(px[ch]);
            }
        }
        Grid { h: self.h, w: self.w, c: chans.len(), data }
    }

    /// Applies `f` to every value, producing a new grid. Panics in debug
    /// builds if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Grid { h: self.h, w: self.w, c: self.c, data }
    }
}

/// Aspect-preserving crop-and-resample specification.
///
/// The window `(top, left, crop_height, crop_width)` must lie inside the
/// source grid and its aspect ratio must match the output aspect within one
/// pixel of rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub output_height: usize,
    pub output_width: usize,
}

impl CropSpec {
    /// Full-frame identity spec for a grid of the given size.
    pub fn full(h: usize, w: usize) -> Self {
        CropSpec { top: 0, left: 0, crop_height: h, crop_width: w, output_height: h, output_width: w }
    }

    /// Validates the spec against a source of size `h x w`.
    pub fn validate(&self, h: usize, w: usize) -> Result<(), GridError> {
        if self.crop_height == 0
            || self.crop_width == 0
            || self.output_height == 0
            || self.output_width == 0
            || self.top + self.crop_height > h
            || self.left + self.crop_width > w
        {
            return Err(GridError::CropOutOfBounds {
                top: self.top,
                left: self.left,
                ch: self.crop_height,
                cw: self.crop_width,
                h,
                w,
            });
        }
        // |crop_h - crop_w * out_h / out_w| <= 1, checked in integers.
        let lhs = self.crop_height as i64 * self.output_width as i64;
        let rhs = self.crop_width as i64 * self.output_height as i64;
        if (lhs - rhs).abs() > self.output_width.max(self.output_height) as i64 {
            return Err(GridError::CropAspect {
                ch: self.crop_height,
                cw: self.crop_width,
                oh: self.output_height,
                ow: self.output_width,
            });
        }
        Ok(())
    }

    /// Per-axis magnitude scale `(sx, sy)` the crop applies to displacement
    /// values living on the source raster: `output_size / crop_size`.
    pub fn flow_scale(&self) -> (f64, f64) {
        (
            self.output_width as f64 / self.crop_width as f64,
            self.output_height as f64 / self.crop_height as f64,
        )
    }

    pub fn is_identity_for(&self, h: usize, w: usize) -> bool {
        self.top == 0
            && self.left == 0
            && self.crop_height == h
            && self.crop_width == w
            && self.output_height == h
            && self.output_width == w
    }
}

/// One linear tap pair along an axis: indices of the two source samples and
/// the fractional weight of the second one.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

/// Bilinear tap positions for one axis of a window resample.
///
/// Maps `dst_len` output samples onto the source window starting at `start`
/// with `len` samples, using the pixel-centre convention and clamping to the
/// window.
pub(crate) fn axis_taps(start: usize, len: usize, dst_len: usize) -> Vec<AxisTap> {
    debug_assert!(len >= 1 && dst_len >= 1);
    let scale = len as f64 / dst_len as f64;
    let last = start + len - 1;
    (0..dst_len)
        .map(|j| {
            let x = start as f64 + (j as f64 + 0.5) * scale - 0.5;
            let x = x.clamp(start as f64, last as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(last);
            AxisTap { lo, hi, t: x - lo as f64 }
        })
        .collect()
}

fn resample_window(src: &Grid, spec: &CropSpec) -> Grid {
    let xt = axis_taps(spec.left, spec.crop_width, spec.output_width);
    let yt = axis_taps(spec.top, spec.crop_height, spec.output_height);
    let c = src.c;
    let mut data = vec![0f32; spec.output_height * spec.output_width * c];
    for (oy, ty) in yt.iter().enumerate() {
        for (ox, tx) in xt.iter().enumerate() {
            let base = (oy * spec.output_width + ox) * c;
            for ch in 0..c {
                let v00 = src.get(ty.lo, tx.lo, ch) as f64;
                let v01 = src.get(ty.lo, tx.hi, ch) as f64;
                let v10 = src.get(ty.hi, tx.lo, ch) as f64;
                let v11 = src.get(ty.hi, tx.hi, ch) as f64;
                let top = v00 + (v01 - v00) * tx.t;
                let bot = v10 + (v11 - v10) * tx.t;
                data[base + ch] = (top + (bot - top) * ty.t) as f32;
            }
        }
    }
    Grid { h: spec.output_height, w: spec.output_width, c, data }
}

/// Crops a window out of `src` and bilinearly resamples it to the spec's
/// output size. Channel semantics are untouched; displacement-channel
/// rescaling is the caller's responsibility.
pub fn crop_apply(src: &Grid, spec: &CropSpec) -> Result<Grid, GridError> {
    spec.validate(src.h, src.w)?;
    if spec.is_identity_for(src.h, src.w) {
        return Ok(src.clone());
    }
    Ok(resample_window(src, spec))
}

/// Bilinear resampling of the whole grid to `out_h x out_w`.
pub fn resample_bilinear(src: &Grid, out_h: usize, out_w: usize) -> Result<Grid, GridError> {
    if out_h == 0 || out_w == 0 {
        return Err(GridError::BadResampleTarget { oh: out_h, ow: out_w });
    }
    if out_h == src.h && out_w == src.w {
        return Ok(src.clone());
    }
    let spec = CropSpec {
        top: 0,
        left: 0,
        crop_height: src.h,
        crop_width: src.w,
        output_height: out_h,
        output_width: out_w,
    };
    Ok(resample_window(src, &spec))
}

/// Per-channel absolute forward difference along `axis`, keeping the spatial
/// size by replicating the last difference at the trailing edge. All outputs
/// are nonnegative.
pub fn spatial_gradient_abs(g: &Grid, axis: Axis2) -> Result<Grid, GridError> {
    let len = match axis {
        Axis2::X => g.w,
        Axis2::Y => g.h,
    };
    if len < 2 {
        return Err(GridError::AxisTooSmall { axis, len });
    }
    let mut out = vec![0f32; g.data.len()];
    match axis {
        Axis2::X => {
            for y in 0..g.h {
                for x in 0..g.w {
                    let xs = x.min(g.w - 2);
                    for ch in 0..g.c {
                        let d = (g.get(y, xs + 1, ch) - g.get(y, xs, ch)).abs();
                        out[(y * g.w + x) * g.c + ch] = d;
                    }
                }
            }
        }
        Axis2::Y => {
            for y in 0..g.h {
                let ys = y.min(g.h - 2);
                for x in 0..g.w {
                    for ch in 0..g.c {
                        let d = (g.get(ys + 1, x, ch) - g.get(ys, x, ch)).abs();
                        out[(y * g.w + x) * g.c + ch] = d;
                    }
                }
            }
        }
    }
    Ok(Grid { h: g.h, w: g.w, c: g.c, data: out })
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read, field: &'static str) -> Result<u32, GridError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| GridError::Format {
        field,
        detail: format!("short read: {e}"),
    })?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes `g` to `path` in the `LGRD` format: 4-byte magic, then version,
/// height, width, channels and dtype tag as little-endian `u32`, then the
/// row-major little-endian `f32` payload.
pub fn raster_write(g: &Grid, path: &Path) -> Result<(), GridError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&RASTER_MAGIC)?;
    write_u32(&mut w, RASTER_VERSION)?;
    write_u32(&mut w, g.h as u32)?;
    write_u32(&mut w, g.w as u32)?;
    write_u32(&mut w, g.c as u32)?;
    write_u32(&mut w, RASTER_DTYPE_F32)?;
    let mut payload = Vec::with_capacity(g.data.len() * 4);
    for v in &g.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Reads a grid back from the `LGRD` format. Round trips are bit-exact.
pub fn raster_read(path: &Path) -> Result<Grid, GridError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| GridError::Format {
        field: "magic",
        detail: format!("short read: {e}"),
    })?;
    if magic != RASTER_MAGIC {
        return Err(GridError::Format {
            field: "magic",
            detail: format!("bad magic {:?}, expected {:?}", magic, RASTER_MAGIC),
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != RASTER_VERSION {
        return Err(GridError::Format {
            field: "version",
            detail: format!("unsupported version {version}, expected {RASTER_VERSION}"),
        });
    }
    let h = read_u32(&mut r, "height")? as usize;
    let w = read_u32(&mut r, "width")? as usize;
    let c = read_u32(&mut r, "channels")? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(GridError::Format {
            field: if h == 0 { "height" } else if w == 0 { "width" } else { "channels" },
            detail: "dimension must be nonzero".into(),
        });
    }
    let dtype = read_u32(&mut r, "dtype")?;
    if dtype != RASTER_DTYPE_F32 {
        return Err(GridError::Format {
            field: "dtype",
            detail: format!("unsupported dtype tag {dtype}, expected {RASTER_DTYPE_F32}"),
        });
    }
    let want = h * w * c;
    let mut payload = Vec::with_capacity(want * 4);
    r.read_to_end(&mut payload)?;
    if payload.len() < want * 4 {
        return Err(GridError::Format {
            field: "payload",
            detail: format!("truncated: got {} bytes, need {}", payload.len(), want * 4),
        });
    }
    if payload.len() > want * 4 {
        return Err(GridError::Format {
            field: "payload",
            detail: format!("trailing bytes: got {} bytes, expected {}", payload.len(), want * 4),
        });
    }
    let mut data = Vec::with_capacity(want);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(GridError::Format {
            field: "payload",
            detail: format!("non-finite value at flat index {index}"),
        });
    }
    Ok(Grid { h, w, c, data })
}
