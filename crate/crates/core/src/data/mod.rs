//! Volume ingestion, slice preparation, pairing, the ULSB bundle and the
//! synthetic lesion generator.

pub mod bundle;
pub mod image;
pub mod nifti;
pub mod pairing;
pub mod synth;

use std::path::Path;

pub use bundle::{read_bundle, write_bundle, DatasetBundle, PatientRange, SliceRecord};
pub use image::{extract_label_slices, extract_slices, resize_lanczos, resize_nearest, Gray8};
pub use nifti::{read_volume, Datatype, VolumeRecord};
pub use pairing::{pair_by_identifier, Pair, Pairing, DEFAULT_ID_PATTERN};
pub use synth::{synth_dataset, LesionKind, SynthConfig};

use crate::error::{Error, Result};

/// Slices of one image/label volume pair, resized to `size × size`.
/// Case ids are `<id>_z<slice>`; the pair identifier is the patient id.
pub fn slices_from_pair(id: &str, image: &Path, label: &Path, size: usize) -> Result<Vec<SliceRecord>> {
    let img = read_volume(image)?;
    let lab = read_volume(label)?;
    if img.dims != lab.dims {
        return Err(Error::shape(format!(
            "{}: image dims {:?} vs label dims {:?}",
            id, img.dims, lab.dims
        )));
    }
    let images = extract_slices(&img);
    let labels = extract_label_slices(&lab);
    images
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(z, (im, lb))| {
            let im = resize_lanczos(&im, size, size)?;
            let lb = resize_nearest(&lb, size, size)?;
            SliceRecord::new(im, lb, format!("{id}_z{z:03}"), id, z as u32)
        })
        .collect()
}
