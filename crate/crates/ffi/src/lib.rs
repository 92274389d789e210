//! C ABI for the scnfusion pipeline.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`ScnfStatus`]; on failure the message is available from
//! [`scnf_last_error`] on the same thread until the next failing call.
//! Panics never unwind into C: they are reported as `SCNF_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use scnfusion::evaluation::auc_midrank;
use scnfusion::features::{extract_subject, Class};
use scnfusion::interpret::{gradcam_map, roi_scores};
use scnfusion::model::{AuxMode, FusionNet};
use scnfusion::nifti::{
    read_nifti_file, read_roi_table_file, resample_labels_nn, AtlasParcellation, VolumeGrid,
};
use scnfusion::nn::Tensor;
use scnfusion::pipeline::{self, Overrides, Run};
use scnfusion::preprocess::{normalize_robust, NormalizationParams};
use scnfusion::scn::{blend, individual_scn, ScnKind, ScnMatrix};
use scnfusion::{Error, NiftiError};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScnfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Nifti = 4,
    Config = 5,
    Shape = 6,
    Numeric = 7,
    ArtifactMismatch = 8,
    Panic = 9,
}

/// A decoded NIfTI volume.
pub struct ScnfVolume(VolumeGrid);

/// An atlas parcellation with its ROI table.
pub struct ScnfAtlas(AtlasParcellation);

/// A trained classifier loaded from a checkpoint.
pub struct ScnfModel {
    net: FusionNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ScnfStatus {
    match e {
        Error::File { source, .. } => status_of(source),
        Error::Io(_) => ScnfStatus::Io,
        Error::Nifti(NiftiError::NonFinite(_)) | Error::Numeric(_) => ScnfStatus::Numeric,
        Error::Nifti(_) => ScnfStatus::Nifti,
        Error::Config(_) | Error::Json(_) => ScnfStatus::Config,
        Error::Shape(_) => ScnfStatus::Shape,
        Error::ArtifactMismatch(_) => ScnfStatus::ArtifactMismatch,
        Error::InvalidInput(_) | Error::EmptyMask | Error::DegenerateSubject => {
            ScnfStatus::InvalidArgument
        }
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScnfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScnfStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            ScnfStatus::NullArgument
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            ScnfStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            ScnfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(
    p: *const f64,
    len: usize,
    what: &'static str,
) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(
    p: *mut f64,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scnf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scnf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a `.nii` or `.nii.gz` file.
#[no_mangle]
pub unsafe extern "C" fn scnf_volume_read(
    path: *const c_char,
    out: *mut *mut ScnfVolume,
) -> ScnfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path, "path")?;
        let (_, vol) = read_nifti_file(&path)?;
        *out = Box::into_raw(Box::new(ScnfVolume(vol)));
        Ok(())
    })
}

/// Writes the grid shape (x, y, z) into `shape[0..3]`.
#[no_mangle]
pub unsafe extern "C" fn scnf_volume_shape(
    volume: *const ScnfVolume,
    shape: *mut usize,
) -> ScnfStatus {
    guard(|| {
        let v = volume.as_ref().ok_or(Failure::Null("volume"))?;
        if shape.is_null() {
            return Err(Failure::Null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&v.0.shape);
        Ok(())
    })
}

/// Borrows the voxel values (x fastest). The pointer lives as long as the
/// volume handle.
#[no_mangle]
pub unsafe extern "C" fn scnf_volume_data(
    volume: *const ScnfVolume,
    data: *mut *const f64,
    len: *mut usize,
) -> ScnfStatus {
    guard(|| {
        let v = volume.as_ref().ok_or(Failure::Null("volume"))?;
        *out_ptr(data, "data")? = v.0.data.as_ptr();
        *out_ptr(len, "len")? = v.0.data.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scnf_volume_free(volume: *mut ScnfVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Reads an atlas label volume and its `label_id<TAB>name` table.
#[no_mangle]
pub unsafe extern "C" fn scnf_atlas_read(
    nifti_path: *const c_char,
    roi_table_path: *const c_char,
    out: *mut *mut ScnfAtlas,
) -> ScnfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let nifti = path_arg(nifti_path, "nifti_path")?;
        let table_path = path_arg(roi_table_path, "roi_table_path")?;
        let table = read_roi_table_file(&table_path, None)?;
        let (_, vol) = read_nifti_file(&nifti)?;
        let atlas = AtlasParcellation::from_volume(&vol, table).map_err(|e| e.in_file(nifti))?;
        *out = Box::into_raw(Box::new(ScnfAtlas(atlas)));
        Ok(())
    })
}

/// Number of ROIs, or 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn scnf_atlas_n_rois(atlas: *const ScnfAtlas) -> usize {
    atlas.as_ref().map_or(0, |a| a.0.n_rois())
}

#[no_mangle]
pub unsafe extern "C" fn scnf_atlas_free(atlas: *mut ScnfAtlas) {
    if !atlas.is_null() {
        drop(Box::from_raw(atlas));
    }
}

/// Normalises `volume` with the default robust parameters and writes the
/// per-ROI means and IQRs (`n_rois` each) and the global mean, SD and
/// median (`global_stats[0..3]`). The atlas is resampled when the grids
/// differ.
#[no_mangle]
pub unsafe extern "C" fn scnf_extract_features(
    volume: *const ScnfVolume,
    atlas: *const ScnfAtlas,
    n_rois: usize,
    roi_means: *mut f64,
    roi_iqrs: *mut f64,
    global_stats: *mut f64,
) -> ScnfStatus {
    guard(|| {
        let v = &volume.as_ref().ok_or(Failure::Null("volume"))?.0;
        let a = &atlas.as_ref().ok_or(Failure::Null("atlas"))?.0;
        if n_rois != a.n_rois() {
            return Err(Failure::Invalid(format!(
                "atlas has {} ROIs, caller passed {n_rois}",
                a.n_rois()
            )));
        }
        let means = slice_out(roi_means, n_rois, "roi_means")?;
        let iqrs = slice_out(roi_iqrs, n_rois, "roi_iqrs")?;
        let global = slice_out(global_stats, 3, "global_stats")?;
        let resampled;
        let parcel = if v.shape == a.shape && v.affine == a.affine {
            a
        } else {
            resampled = resample_labels_nn(a, v)?;
            &resampled
        };
        let norm = normalize_robust(v, &NormalizationParams::default())?;
        let f = extract_subject("subject", Class::Hc, &norm.volume, &norm.mask, parcel)?;
        means.copy_from_slice(&f.roi_means);
        iqrs.copy_from_slice(&f.roi_iqrs);
        global.copy_from_slice(&[
            f.global_stats.mean,
            f.global_stats.std,
            f.global_stats.median,
        ]);
        Ok(())
    })
}

/// Builds the `2 × n × n` SCN input of one subject from its descriptors and
/// the two `n × n` group correlation matrices, blended with weight `alpha`
/// on the group term.
#[no_mangle]
pub unsafe extern "C" fn scnf_build_scn(
    n: usize,
    roi_means: *const f64,
    roi_iqrs: *const f64,
    group_mean: *const f64,
    group_iqr: *const f64,
    alpha: f64,
    out: *mut f64,
) -> ScnfStatus {
    guard(|| {
        let means = slice_arg(roi_means, n, "roi_means")?;
        let iqrs = slice_arg(roi_iqrs, n, "roi_iqrs")?;
        let gm = slice_arg(group_mean, n * n, "group_mean")?;
        let gi = slice_arg(group_iqr, n * n, "group_iqr")?;
        let out = slice_out(out, 2 * n * n, "out")?;
        let group = |values: &[f64]| ScnMatrix {
            n,
            values: values.to_vec(),
            kind: ScnKind::Group,
        };
        let c0 = blend(&group(gm), &individual_scn(means)?, alpha)?;
        let c1 = blend(&group(gi), &individual_scn(iqrs)?, alpha)?;
        out[..n * n].copy_from_slice(&c0.values);
        out[n * n..].copy_from_slice(&c1.values);
        Ok(())
    })
}

/// Loads `<stem>.json` + `<stem>.bin` written by `scnfusion train`.
#[no_mangle]
pub unsafe extern "C" fn scnf_model_load(
    checkpoint_stem: *const c_char,
    out: *mut *mut ScnfModel,
) -> ScnfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let stem = path_arg(checkpoint_stem, "checkpoint_stem")?;
        let net = FusionNet::load(&stem)?;
        *out = Box::into_raw(Box::new(ScnfModel { net }));
        Ok(())
    })
}

/// Input sizes of a model: ROI count and auxiliary vector length.
#[no_mangle]
pub unsafe extern "C" fn scnf_model_dims(
    model: *const ScnfModel,
    n_rois: *mut usize,
    n_aux: *mut usize,
) -> ScnfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        *out_ptr(n_rois, "n_rois")? = m.net.config.n_rois;
        *out_ptr(n_aux, "n_aux")? = m.net.config.n_aux;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scnf_model_free(model: *mut ScnfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn mode_of(use_aux: c_int) -> AuxMode {
    if use_aux != 0 {
        AuxMode::Enabled
    } else {
        AuxMode::Disabled
    }
}

unsafe fn inputs(
    model: &ScnfModel,
    scn: *const f64,
    aux: *const f64,
) -> Result<(Tensor, Tensor), Failure> {
    let n = model.net.config.n_rois;
    let k = model.net.config.n_aux;
    let scn = slice_arg(scn, 2 * n * n, "scn")?;
    let aux = if aux.is_null() {
        vec![0.0; k]
    } else {
        std::slice::from_raw_parts(aux, k).to_vec()
    };
    Ok((
        Tensor::new(vec![1, 2, n, n], scn.to_vec()),
        Tensor::new(vec![1, k], aux),
    ))
}

/// Eval-mode ADHD probability of one subject. `scn` holds `2·n·n` values,
/// `aux` holds `n_aux` values and may be NULL when `use_aux` is 0.
#[no_mangle]
pub unsafe extern "C" fn scnf_model_predict(
    model: *mut ScnfModel,
    scn: *const f64,
    aux: *const f64,
    use_aux: c_int,
    prob_adhd: *mut f64,
) -> ScnfStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Failure::Null("model"))?;
        if use_aux != 0 && aux.is_null() {
            return Err(Failure::Null("aux"));
        }
        let out = out_ptr(prob_adhd, "prob_adhd")?;
        let (s, a) = inputs(m, scn, aux)?;
        let probs = match mode_of(use_aux) {
            AuxMode::Enabled => m.net.forward(&s, &a)?,
            AuxMode::Disabled => m.net.forward_no_aux(&s)?,
        };
        *out = probs.data[1];
        Ok(())
    })
}

/// Grad-CAM ROI importance (max-normalised, `n_rois` values) of one
/// subject for the ADHD logit.
#[no_mangle]
pub unsafe extern "C" fn scnf_model_gradcam(
    model: *mut ScnfModel,
    scn: *const f64,
    aux: *const f64,
    use_aux: c_int,
    scores: *mut f64,
) -> ScnfStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Failure::Null("model"))?;
        if use_aux != 0 && aux.is_null() {
            return Err(Failure::Null("aux"));
        }
        let n = m.net.config.n_rois;
        let out = slice_out(scores, n, "scores")?;
        let (s, a) = inputs(m, scn, aux)?;
        let cam = m.net.cam_inputs(&s, &a, mode_of(use_aux), 1)?;
        out.copy_from_slice(&roi_scores(&gradcam_map(&cam, n)?, n)?);
        Ok(())
    })
}

/// Midrank ROC AUC with label 1 as the positive class.
#[no_mangle]
pub unsafe extern "C" fn scnf_auc(
    labels: *const u8,
    scores: *const f64,
    n: usize,
    auc: *mut f64,
) -> ScnfStatus {
    guard(|| {
        if labels.is_null() {
            return Err(Failure::Null("labels"));
        }
        let labels: Vec<usize> = std::slice::from_raw_parts(labels, n)
            .iter()
            .map(|&l| usize::from(l))
            .collect();
        if labels.iter().any(|&l| l > 1) {
            return Err(Failure::Invalid("labels must be 0 or 1".into()));
        }
        let scores = slice_arg(scores, n, "scores")?;
        *out_ptr(auc, "auc")? = auc_midrank(&labels, scores)?;
        Ok(())
    })
}

/// Runs one pipeline stage (`synth`, `extract`, `train`, `explain` or
/// `report`) as the CLI would. `config_path` and `output_dir` may be NULL;
/// `jobs` of 0 uses all cores.
#[no_mangle]
pub unsafe extern "C" fn scnf_run_stage(
    config_path: *const c_char,
    stage: *const c_char,
    output_dir: *const c_char,
    jobs: usize,
) -> ScnfStatus {
    guard(|| {
        let stage = path_arg(stage, "stage")?;
        let config = if config_path.is_null() {
            None
        } else {
            Some(path_arg(config_path, "config_path")?)
        };
        let output_dir = if output_dir.is_null() {
            None
        } else {
            Some(path_arg(output_dir, "output_dir")?)
        };
        let run = Run::load(
            config.as_deref(),
            &Overrides {
                output_dir,
                ..Overrides::default()
            },
        )?;
        let pool = rayon_pool(jobs)?;
        let stage = stage.to_string_lossy().into_owned();
        pool.install(|| -> Result<(), Failure> {
            match stage.as_str() {
                "synth" => pipeline::synth(&run).map(drop)?,
                "extract" => pipeline::extract(&run).map(drop)?,
                "train" => pipeline::train(&run).map(drop)?,
                "explain" => pipeline::explain(&run).map(drop)?,
                "report" => pipeline::report(&run).map(drop)?,
                other => return Err(Failure::Invalid(format!("unknown stage {other:?}"))),
            }
            Ok(())
        })
    })
}

fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Core(Error::Config(format!("cannot start worker pool: {e}"))))
}
