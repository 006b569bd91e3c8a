//! Minimal DICOM Part 10 reader and writer.
//!
//! Only explicit-VR little-endian data sets are understood, and only the
//! handful of attributes needed to rebuild a CT slice are decoded. Everything
//! else is skipped by its declared length.

use super::{CtSlice, IngestError, Result};

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";

type Tag = (u16, u16);

const SOP_INSTANCE_UID: Tag = (0x0008, 0x0018);
const IMAGE_POSITION_PATIENT: Tag = (0x0020, 0x0032);
const ROWS: Tag = (0x0028, 0x0010);
const COLUMNS: Tag = (0x0028, 0x0011);
const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
const RESCALE_INTERCEPT: Tag = (0x0028, 0x1052);
const RESCALE_SLOPE: Tag = (0x0028, 0x1053);
const PIXEL_DATA: Tag = (0x7FE0, 0x0010);

/// VRs encoded with two reserved bytes and a 32-bit length.
fn has_long_length(vr: [u8; 2]) -> bool {
    matches!(
        &vr,
        b"OB" | b"OW" | b"OF" | b"OD" | b"OL" | b"OV" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV"
    )
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn text_value(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes)
        .trim_end_matches(['\0', ' '])
        .trim_start()
        .to_string()
}

fn us_value(tag: &'static str, bytes: &[u8]) -> Result<u16> {
    if bytes.len() != 2 {
        return Err(IngestError::BadValue {
            tag,
            value: format!("{bytes:02X?}"),
        });
    }
    Ok(read_u16(bytes, 0))
}

fn ds_values(tag: &'static str, bytes: &[u8]) -> Result<Vec<f64>> {
    let text = text_value(bytes);
    text.split('\\')
        .map(|v| {
            v.trim().parse::<f64>().map_err(|_| IngestError::BadValue {
                tag,
                value: text.clone(),
            })
        })
        .collect()
}

fn ds_single(tag: &'static str, bytes: &[u8]) -> Result<f64> {
    match ds_values(tag, bytes)?.as_slice() {
        [v] if v.is_finite() => Ok(*v),
        _ => Err(IngestError::BadValue {
            tag,
            value: text_value(bytes),
        }),
    }
}

#[derive(Default)]
struct Fields<'a> {
    source_id: Option<String>,
    position: Option<&'a [u8]>,
    rows: Option<u16>,
    cols: Option<u16>,
    bits_allocated: Option<u16>,
    pixel_representation: Option<u16>,
    intercept: Option<&'a [u8]>,
    slope: Option<&'a [u8]>,
    pixel_data: Option<&'a [u8]>,
}

/// Decodes one CT slice from a DICOM file body.
pub fn parse_dicom_slice(bytes: &[u8]) -> Result<CtSlice> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(IngestError::MissingMagic);
    }
    let mut f = Fields::default();
    let mut pos = PREAMBLE_LEN + MAGIC.len();
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(IngestError::TruncatedElement { offset: pos });
        }
        let tag = (read_u16(bytes, pos), read_u16(bytes, pos + 2));
        let vr = [bytes[pos + 4], bytes[pos + 5]];
        let (len, header) = if has_long_length(vr) {
            if bytes.len() - pos < 12 {
                return Err(IngestError::TruncatedElement { offset: pos });
            }
            let len = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap());
            if len == u32::MAX {
                return Err(IngestError::UndefinedLength {
                    group: tag.0,
                    element: tag.1,
                });
            }
            (len as usize, 12)
        } else {
            (read_u16(bytes, pos + 6) as usize, 8)
        };
        let start = pos + header;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or(IngestError::TruncatedElement { offset: pos })?;
        let value = &bytes[start..end];
        match tag {
            SOP_INSTANCE_UID => f.source_id = Some(text_value(value)),
            IMAGE_POSITION_PATIENT => f.position = Some(value),
            ROWS => f.rows = Some(us_value("Rows", value)?),
            COLUMNS => f.cols = Some(us_value("Columns", value)?),
            BITS_ALLOCATED => f.bits_allocated = Some(us_value("BitsAllocated", value)?),
            PIXEL_REPRESENTATION => {
                f.pixel_representation = Some(us_value("PixelRepresentation", value)?)
            }
            RESCALE_INTERCEPT => f.intercept = Some(value),
            RESCALE_SLOPE => f.slope = Some(value),
            PIXEL_DATA => f.pixel_data = Some(value),
            _ => {}
        }
        pos = end;
    }

    let rows = f.rows.ok_or(IngestError::MissingTag("Rows"))? as usize;
    let cols = f.cols.ok_or(IngestError::MissingTag("Columns"))? as usize;
    let bits = f.bits_allocated.unwrap_or(16);
    if bits != 16 {
        return Err(IngestError::UnsupportedBitsAllocated(bits));
    }
    let data = f.pixel_data.ok_or(IngestError::MissingTag("PixelData"))?;
    let expected = 2 * rows * cols;
    if data.len() != expected {
        return Err(IngestError::PixelLengthMismatch {
            expected,
            actual: data.len(),
        });
    }
    // Absent PixelRepresentation reads as signed.
    let signed = f.pixel_representation.unwrap_or(1) != 0;
    let pixels = data
        .chunks_exact(2)
        .map(|c| {
            let raw = u16::from_le_bytes([c[0], c[1]]);
            if signed {
                Ok(raw as i16)
            } else {
                i16::try_from(raw).map_err(|_| IngestError::PixelOutOfRange(raw))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let rescale_slope = match f.slope {
        Some(v) => ds_single("RescaleSlope", v)?,
        None => 1.0,
    };
    let rescale_intercept = match f.intercept {
        Some(v) => ds_single("RescaleIntercept", v)?,
        None => 0.0,
    };
    let position = f.position.ok_or(IngestError::MissingTag("ImagePositionPatient"))?;
    let z_position = match ds_values("ImagePositionPatient", position)?.as_slice() {
        [_, _, z] if z.is_finite() => *z,
        _ => {
            return Err(IngestError::BadValue {
                tag: "ImagePositionPatient",
                value: text_value(position),
            })
        }
    };

    let slice = CtSlice {
        rows,
        cols,
        pixels,
        rescale_slope,
        rescale_intercept,
        z_position,
        source_id: f.source_id.unwrap_or_default(),
    };
    slice.validate()?;
    Ok(slice)
}

fn push_element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if has_long_length(*vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

/// Pads a text value to even length as the standard requires.
fn padded(text: &str, pad: u8) -> Vec<u8> {
    let mut v = text.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

/// Encodes a slice as the exact element subset [`parse_dicom_slice`] reads,
/// in ascending tag order.
pub fn write_dicom_slice(slice: &CtSlice) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE_LEN + 256 + 2 * slice.pixels.len());
    out.resize(PREAMBLE_LEN, 0);
    out.extend_from_slice(MAGIC);

    let uid = padded(&slice.source_id, 0);
    // Identifiers that overflow a short length field go out as UT.
    let uid_vr = if uid.len() > u16::MAX as usize { b"UT" } else { b"UI" };
    push_element(&mut out, SOP_INSTANCE_UID, uid_vr, &uid);
    push_element(
        &mut out,
        IMAGE_POSITION_PATIENT,
        b"DS",
        &padded(&format!("0\\0\\{}", slice.z_position), b' '),
    );
    push_element(&mut out, ROWS, b"US", &(slice.rows as u16).to_le_bytes());
    push_element(&mut out, COLUMNS, b"US", &(slice.cols as u16).to_le_bytes());
    push_element(&mut out, BITS_ALLOCATED, b"US", &16u16.to_le_bytes());
    push_element(&mut out, PIXEL_REPRESENTATION, b"US", &1u16.to_le_bytes());
    push_element(
        &mut out,
        RESCALE_INTERCEPT,
        b"DS",
        &padded(&slice.rescale_intercept.to_string(), b' '),
    );
    push_element(
        &mut out,
        RESCALE_SLOPE,
        b"DS",
        &padded(&slice.rescale_slope.to_string(), b' '),
    );
    let pixel_bytes: Vec<u8> = slice.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    push_element(&mut out, PIXEL_DATA, b"OW", &pixel_bytes);
    out
}
