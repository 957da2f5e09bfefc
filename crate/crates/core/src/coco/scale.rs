use super::{CocoError, Dataset, ImageRecord, PersonAnnotation, Segmentation};

/// Round-half-up of `factor × dim`, never below one pixel.
pub fn scale_dimension(dim: u32, factor: f64) -> u32 {
    let scaled = (f64::from(dim) * factor + 0.5).floor();
    scaled.clamp(1.0, f64::from(u32::MAX)) as u32
}

/// Rescales every coordinate of a dataset by `factor`.
///
/// Keypoints, boxes and polygon vertices are multiplied by `factor`, stored
/// areas by `factor²`. Image sizes are rounded with [`scale_dimension`] and
/// RLE masks are nearest-neighbour resampled onto the new grid. Coordinates
/// are not clamped to the new image bounds.
pub fn scale_annotations(dataset: &Dataset, factor: f64) -> Result<Dataset, CocoError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(CocoError::InvalidFactor(factor));
    }
    let images: Vec<ImageRecord> = dataset
        .images()
        .iter()
        .map(|im| ImageRecord {
            width: scale_dimension(im.width, factor),
            height: scale_dimension(im.height, factor),
            ..im.clone()
        })
        .collect();
    let annotations = dataset
        .annotations()
        .iter()
        .map(|a| scale_person(a, factor))
        .collect();
    Ok(Dataset::assemble(
        images,
        annotations,
        dataset.person_category().clone(),
    ))
}

fn scale_person(a: &PersonAnnotation, factor: f64) -> PersonAnnotation {
    let mut out = a.clone();
    for k in &mut out.keypoints {
        k.x *= factor;
        k.y *= factor;
    }
    out.bbox = a.bbox.scaled(factor);
    out.area = a.area * factor * factor;
    out.segmentation = a.segmentation.as_ref().map(|s| match s {
        Segmentation::Polygons(polys) => Segmentation::Polygons(
            polys
                .iter()
                .map(|p| p.iter().map(|v| v * factor).collect())
                .collect(),
        ),
        Segmentation::Rle(r) => Segmentation::Rle(r.resized(
            scale_dimension(r.height, factor),
            scale_dimension(r.width, factor),
        )),
    });
    out
}
