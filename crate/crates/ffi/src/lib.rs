//! C ABI for the bdnn trainer.
//!
//! Objects cross the boundary as opaque pointers created by `bdnn_*_new` or
//! `bdnn_*_load` style functions and released with the matching `*_free`.
//! Every fallible function returns a [`BdnnStatus`]; on failure the message
//! is available from [`bdnn_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bdnn::data::{load_csv, Dataset};
use bdnn::metrics::compute_metrics;
use bdnn::model::{build_exact, BuildOptions};
use bdnn::network::{BdnnParams, NetworkSpec, SavedModel, ThresholdMode, WeightDomain};
use bdnn::solver::{export_mps, solve_with_start, SolverConfig, Status};
use bdnn::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Parse = 5,
    Infeasible = 6,
    NoIncumbent = 7,
    Unsupported = 8,
    Numerical = 9,
    Panic = 10,
}

impl From<&Error> for BdnnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidSpec(_)
            | Error::InvalidParams(_)
            | Error::InvalidDataset(_)
            | Error::InvalidArgument(_)
            | Error::MalformedModel(_) => BdnnStatus::InvalidArgument,
            Error::DimensionMismatch { .. } => BdnnStatus::DimensionMismatch,
            Error::Io { .. } => BdnnStatus::Io,
            Error::Csv { .. } | Error::Json(_) => BdnnStatus::Parse,
            Error::Infeasible(_) => BdnnStatus::Infeasible,
            Error::NoIncumbent => BdnnStatus::NoIncumbent,
            Error::Unsupported(_) => BdnnStatus::Unsupported,
            Error::Numerical(_) => BdnnStatus::Numerical,
        }
    }
}

/// Trained network parameters.
pub struct BdnnNetwork(BdnnParams);

/// Samples with class labels.
pub struct BdnnDataset(Dataset);

/// Options for exact training and model export.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BdnnTrainOptions {
    /// Nonzero for weights in {-1, 0, 1}, zero for weights in [-1, 1].
    pub ternary: u8,
    pub use_bias: u8,
    /// Nonzero to learn thresholds, zero to fix them at 0.
    pub learn_thresholds: u8,
    pub epsilon: f64,
    /// Seconds; zero or negative for no limit.
    pub time_limit: f64,
    /// Zero for no limit.
    pub node_limit: u64,
    /// Relative gap in percent.
    pub gap_tolerance: f64,
    pub seed: u64,
    pub threads: usize,
}

/// Accuracy and macro-averaged scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BdnnMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Outcome of a training solve.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BdnnTrainSummary {
    pub objective: f64,
    pub best_bound: f64,
    /// Percent; negative when no gap is known.
    pub gap: f64,
    pub nodes: u64,
    /// 1 when optimality was proven.
    pub optimal: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), BdnnError>) -> BdnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BdnnStatus::Ok,
        Ok(Err(BdnnError(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {message}"));
            BdnnStatus::Panic
        }
    }
}

struct BdnnError(BdnnStatus, String);

impl From<Error> for BdnnError {
    fn from(e: Error) -> Self {
        BdnnError(BdnnStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> BdnnError {
    BdnnError(BdnnStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, BdnnError> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| BdnnError(BdnnStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], BdnnError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, BdnnError> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, BdnnError> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bdnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bdnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn bdnn_train_options_default() -> BdnnTrainOptions {
    let solver = SolverConfig::default();
    BdnnTrainOptions {
        ternary: 1,
        use_bias: 0,
        learn_thresholds: 1,
        epsilon: BuildOptions::default().epsilon_strict,
        time_limit: 0.0,
        node_limit: 0,
        gap_tolerance: solver.gap_tolerance,
        seed: solver.seed,
        threads: solver.threads,
    }
}

/// Dataset from a row-major `m x n` sample matrix and `m` labels in
/// `0..num_classes`.
///
/// # Safety
/// `samples` must point to `m * n` doubles, `labels` to `m` values and `out`
/// to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn bdnn_dataset_new(
    samples: *const f64,
    labels: *const usize,
    m: usize,
    n: usize,
    num_classes: usize,
    out: *mut *mut BdnnDataset,
) -> BdnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let flat = slice_arg(samples, m * n, "samples")?;
        let labels = slice_arg(labels, m, "labels")?;
        let rows = if n == 0 { Vec::new() } else { flat.chunks(n).map(<[f64]>::to_vec).collect() };
        let data = Dataset::with_numbered_classes(rows, labels.to_vec(), num_classes)?;
        *out = Box::into_raw(Box::new(BdnnDataset(data)));
        Ok(())
    })
}

/// Reads a CSV; `label_column < 0` selects the last column.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bdnn_dataset_load_csv(
    path: *const c_char,
    label_column: isize,
    has_header: u8,
    out: *mut *mut BdnnDataset,
) -> BdnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path)?;
        let column = usize::try_from(label_column).ok();
        let data = load_csv(&path, column, has_header != 0)?;
        *out = Box::into_raw(Box::new(BdnnDataset(data)));
        Ok(())
    })
}

/// Number of samples, 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn bdnn_dataset_len(data: *const BdnnDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Sample dimension, 0 for NULL or empty.
///
/// # Safety
/// `data` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn bdnn_dataset_dim(data: *const BdnnDataset) -> usize {
    data.as_ref().filter(|d| !d.0.is_empty()).map_or(0, |d| d.0.dim())
}

/// # Safety
/// `data` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bdnn_dataset_free(data: *mut BdnnDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Loads parameters written by `bdnn train` or [`bdnn_network_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bdnn_network_load(path: *const c_char, out: *mut *mut BdnnNetwork) -> BdnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let params = SavedModel::load(path_arg(path)?)?.to_params()?;
        *out = Box::into_raw(Box::new(BdnnNetwork(params)));
        Ok(())
    })
}

/// # Safety
/// `net` must be a live network handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bdnn_network_save(net: *const BdnnNetwork, path: *const c_char) -> BdnnStatus {
    guard(|| {
        let net = handle(net, "network")?;
        SavedModel::from_params(&net.0, None).save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `net` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bdnn_network_free(net: *mut BdnnNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input dimension, 0 for NULL.
///
/// # Safety
/// `net` must be NULL or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn bdnn_network_input_dim(net: *const BdnnNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.spec.input_dim())
}

/// Number of classes (output width), 0 for NULL.
///
/// # Safety
/// `net` must be NULL or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn bdnn_network_num_classes(net: *const BdnnNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.spec.num_classes())
}

/// Predicted class of one sample.
///
/// # Safety
/// `x` must point to `len` doubles and `class_out` be writable.
#[no_mangle]
pub unsafe extern "C" fn bdnn_network_predict(
    net: *const BdnnNetwork,
    x: *const f64,
    len: usize,
    class_out: *mut usize,
) -> BdnnStatus {
    guard(|| {
        let net = handle(net, "network")?;
        let out = out_arg(class_out, "class_out")?;
        *out = net.0.predict(slice_arg(x, len, "x")?)?;
        Ok(())
    })
}

/// Output activations (0 or 1) of one sample. `capacity` must be at least the
/// number of classes.
///
/// # Safety
/// `x` must point to `len` doubles and `bits_out` to `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn bdnn_network_forward(
    net: *const BdnnNetwork,
    x: *const f64,
    len: usize,
    bits_out: *mut u8,
    capacity: usize,
) -> BdnnStatus {
    guard(|| {
        let net = handle(net, "network")?;
        let bits = net.0.output(slice_arg(x, len, "x")?)?;
        if capacity < bits.len() {
            return Err(BdnnError(
                BdnnStatus::DimensionMismatch,
                format!("output needs {} bytes, buffer has {capacity}", bits.len()),
            ));
        }
        if bits_out.is_null() {
            return Err(null("bits_out"));
        }
        std::slice::from_raw_parts_mut(bits_out, bits.len()).copy_from_slice(&bits);
        Ok(())
    })
}

/// Accuracy, precision, recall and F1 on a dataset.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bdnn_evaluate(
    net: *const BdnnNetwork,
    data: *const BdnnDataset,
    out: *mut BdnnMetrics,
) -> BdnnStatus {
    guard(|| {
        let net = handle(net, "network")?;
        let data = handle(data, "dataset")?;
        let out = out_arg(out, "out")?;
        let predictions = data
            .0
            .samples()
            .iter()
            .map(|x| net.0.predict(x))
            .collect::<bdnn::Result<Vec<_>>>()?;
        let m = compute_metrics(&predictions, data.0.labels())?;
        *out = BdnnMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        };
        Ok(())
    })
}

unsafe fn network_spec(data: &Dataset, hidden: *const usize, hidden_len: usize, opts: &BdnnTrainOptions) -> Result<NetworkSpec, BdnnError> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()).into());
    }
    let mut widths = vec![data.dim()];
    widths.extend_from_slice(slice_arg(hidden, hidden_len, "hidden")?);
    widths.push(data.num_classes());
    Ok(NetworkSpec::new(
        widths,
        if opts.ternary != 0 { WeightDomain::Ternary } else { WeightDomain::BoxContinuous },
        opts.use_bias != 0,
        if opts.learn_thresholds != 0 { ThresholdMode::Learned } else { ThresholdMode::FixedZero },
    )?)
}

/// Trains with the exact model. Status `NoIncumbent` means a limit was hit
/// before any network was found; `Infeasible` that none exists.
///
/// # Safety
/// `hidden` must point to `hidden_len` widths; handles live; outputs writable.
/// `options` and `summary` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn bdnn_train_exact(
    data: *const BdnnDataset,
    hidden: *const usize,
    hidden_len: usize,
    options: *const BdnnTrainOptions,
    net_out: *mut *mut BdnnNetwork,
    summary: *mut BdnnTrainSummary,
) -> BdnnStatus {
    guard(|| {
        let data = &handle(data, "dataset")?.0;
        let out = out_arg(net_out, "net_out")?;
        let opts = options.as_ref().copied().unwrap_or_else(|| bdnn_train_options_default());
        let spec = network_spec(data, hidden, hidden_len, &opts)?;
        let build = BuildOptions {
            epsilon_strict: opts.epsilon,
            ..BuildOptions::default()
        };
        let solver = SolverConfig {
            time_limit: (opts.time_limit > 0.0).then_some(opts.time_limit),
            node_limit: (opts.node_limit > 0).then_some(opts.node_limit),
            gap_tolerance: opts.gap_tolerance,
            seed: opts.seed,
            threads: opts.threads.max(1),
            ..SolverConfig::default()
        };
        let formulation = build_exact(data, &spec, &build)?;
        let start = formulation
            .encode(&BdnnParams::zeros(&spec), data)?
            .ok_or_else(|| Error::Numerical("the zero network does not fit the model".into()))?;
        let result = solve_with_start(formulation.model(), &solver, &start)?;
        if let Some(s) = summary.as_mut() {
            *s = BdnnTrainSummary {
                objective: result.objective,
                best_bound: result.best_bound,
                gap: result.gap.unwrap_or(-1.0),
                nodes: result.nodes,
                optimal: u8::from(result.status == Status::Optimal),
            };
        }
        let x = match (result.status, result.incumbent) {
            (Status::Optimal | Status::Feasible, Some(x)) => x,
            (Status::Infeasible, _) => return Err(Error::Infeasible("the training model has no solution".into()).into()),
            (Status::TimeLimitNoIncumbent, _) => return Err(Error::NoIncumbent.into()),
            (status, _) => return Err(Error::Numerical(format!("solver ended with status {status:?}")).into()),
        };
        *out = Box::into_raw(Box::new(BdnnNetwork(formulation.decode_params(&x))));
        Ok(())
    })
}

/// Writes the exact training model as MPS without solving it.
///
/// # Safety
/// As for [`bdnn_train_exact`]; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bdnn_export_mps(
    data: *const BdnnDataset,
    hidden: *const usize,
    hidden_len: usize,
    options: *const BdnnTrainOptions,
    path: *const c_char,
) -> BdnnStatus {
    guard(|| {
        let data = &handle(data, "dataset")?.0;
        let opts = options.as_ref().copied().unwrap_or_else(|| bdnn_train_options_default());
        let spec = network_spec(data, hidden, hidden_len, &opts)?;
        let build = BuildOptions {
            epsilon_strict: opts.epsilon,
            ..BuildOptions::default()
        };
        let formulation = build_exact(data, &spec, &build)?;
        export_mps(formulation.model(), path_arg(path)?)?;
        Ok(())
    })
}
