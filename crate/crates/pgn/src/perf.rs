//! Parameter and multiply-accumulate accounting, plus wall-time and
//! peak-memory measurement.
//!
//! Counting conventions (chosen to reproduce the published VGG-19 figures):
//! one multiply-accumulate is one MAC (not two FLOPs); a convolution costs
//! `k^2 * Cin * Cout * Hout * Wout` weight MACs plus `Cout * Hout * Wout`
//! bias adds; pooling, upsampling, normalization and activations are free.
//! Gradient cost of the teacher loss is charged at three forward passes per
//! image of the pair (2 forward + 1 backward).

use crate::nn::{Chw, Layer, Scalar};
use crate::{Error, Result};
use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

/// Cost summary for one network or loss path.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostReport {
    pub label: String,
    pub params: u64,
    pub macs_forward: u64,
    /// Cost of one gradient evaluation under the x3 convention; equals
    /// `macs_forward` for networks whose gradient is a single forward pass.
    pub macs_gradient: u64,
    pub wall_time_s: Option<f64>,
    pub peak_memory_bytes: Option<u64>,
}

impl CostReport {
    pub fn csv_header() -> &'static str {
        "label,params,macs_forward,macs_gradient,wall_time_s,peak_memory_bytes"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.label,
            self.params,
            self.macs_forward,
            self.macs_gradient,
            self.wall_time_s
                .map(|t| format!("{t:.6}"))
                .unwrap_or_default(),
            self.peak_memory_bytes
                .map(|b| b.to_string())
                .unwrap_or_default(),
        )
    }
}

/// Renders reports as an aligned text table.
pub fn format_table(reports: &[CostReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<18} {:>12} {:>16} {:>16} {:>12} {:>14}\n",
        "Model", "Params", "MACs (fwd)", "MACs (grad)", "Time [s]", "Peak mem"
    ));
    for r in reports {
        s.push_str(&format!(
            "{:<18} {:>12} {:>16} {:>16} {:>12} {:>14}\n",
            r.label,
            human_count(r.params),
            human_count(r.macs_forward),
            human_count(r.macs_gradient),
            r.wall_time_s
                .map(|t| format!("{t:.4}"))
                .unwrap_or_else(|| "-".into()),
            r.peak_memory_bytes
                .map(human_bytes)
                .unwrap_or_else(|| "-".into()),
        ));
    }
    s
}

fn human_count(v: u64) -> String {
    if v >= 1_000_000_000 {
        format!("{:.2}B", v as f64 / 1e9)
    } else if v >= 1_000_000 {
        format!("{:.2}M", v as f64 / 1e6)
    } else if v >= 1_000 {
        format!("{:.2}K", v as f64 / 1e3)
    } else {
        v.to_string()
    }
}

fn human_bytes(v: u64) -> String {
    if v >= 1 << 30 {
        format!("{:.2}GiB", v as f64 / (1u64 << 30) as f64)
    } else if v >= 1 << 20 {
        format!("{:.2}MiB", v as f64 / (1u64 << 20) as f64)
    } else {
        format!("{v}B")
    }
}

/// Total scalar parameters, including biases.
pub fn count_params<F: Scalar>(network: &dyn Layer<F>) -> u64 {
    crate::nn::param_count(network)
}

/// Analytic MACs of one forward pass on a single image of shape `input`.
/// The network's layer costs are summed (additivity is the defining
/// property, covered by tests).
pub fn count_macs<F: Scalar>(network: &dyn Layer<F>, input: Chw) -> u64 {
    network.cost(input).0
}

/// Shape-checked MACs for a backbone spec: validates channel count and
/// spatial divisibility before walking the layers.
pub fn count_macs_backbone<F: Scalar>(
    network: &dyn Layer<F>,
    spec: &crate::networks::BackboneSpec,
    h: usize,
    w: usize,
) -> Result<u64> {
    let d = spec.spatial_divisor();
    if !h.is_multiple_of(d) || !w.is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{}: input {h}x{w} not divisible by {d}",
            spec.label()
        )));
    }
    Ok(count_macs(network, (crate::networks::BACKBONE_IN_CHANNELS, h, w)))
}

// ---------------------------------------------------------------------------
// Peak-memory tracking
//
// A wrapping global allocator keeps a live-byte counter and a resettable
// high-water mark. Binaries and test executables opt in with
// `#[global_allocator] static A: TrackingAllocator = TrackingAllocator;`;
// when no tracking allocator is installed, measurements report memory as
// unavailable instead of guessing.

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);
static TRACKER_INSTALLED: AtomicBool = AtomicBool::new(false);

/// Drop-in allocator that mirrors `System` while tracking live bytes.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            TRACKER_INSTALLED.store(true, Ordering::Relaxed);
            let live = LIVE_BYTES.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

/// Resets the high-water mark to the current live size.
pub fn reset_peak_memory() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// High-water mark since the last reset, if a tracking allocator is
/// installed in this process.
pub fn peak_memory_bytes() -> Option<u64> {
    TRACKER_INSTALLED
        .load(Ordering::Relaxed)
        .then(|| PEAK_BYTES.load(Ordering::Relaxed) as u64)
}

/// Timing/memory measurement of one computation path.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub median_wall_s: f64,
    /// `None` when no tracking allocator is installed.
    pub peak_bytes: Option<u64>,
    pub repeats: usize,
}

/// Runs `f` `warmup + repeats` times; reports the median wall time of the
/// measured runs and the largest allocation high-water mark seen among them.
pub fn measure<R>(repeats: usize, warmup: usize, mut f: impl FnMut() -> R) -> Result<Measurement> {
    if repeats < 5 {
        return Err(Error::Config(format!(
            "measurement needs at least 5 repeats, got {repeats}"
        )));
    }
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let mut times = Vec::with_capacity(repeats);
    let mut peak: Option<u64> = None;
    for _ in 0..repeats {
        reset_peak_memory();
        let t0 = Instant::now();
        std::hint::black_box(f());
        times.push(t0.elapsed().as_secs_f64());
        if let Some(p) = peak_memory_bytes() {
            peak = Some(peak.unwrap_or(0).max(p));
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_wall_s = times[times.len() / 2];
    Ok(Measurement {
        median_wall_s,
        peak_bytes: peak,
        repeats,
    })
}
