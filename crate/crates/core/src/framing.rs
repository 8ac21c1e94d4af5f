//! Byte-level framing shared by every wire format in this crate.
//!
//! All persisted or transported structures use the same layout: a fixed
//! 4-byte magic followed by a sequence of fields, each prefixed with a
//! 4-byte big-endian length. There is no general tag/value scheme; each
//! format fixes the number and meaning of its fields, so decoding is a
//! matter of checking the magic, reading exactly N fields, and rejecting
//! anything left over.

use thiserror::Error;

/// Errors raised while decoding a framed byte string.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated input: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("trailing bytes after final field: {count}")]
    TrailingBytes { count: usize },
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("field {index} malformed: {reason}")]
    BadField { index: usize, reason: String },
}

/// Encodes `fields` under the given magic.
pub fn encode(magic: [u8; 4], fields: &[&[u8]]) -> Vec<u8> {
    let body: usize = fields.iter().map(|f| 4 + f.len()).sum();
    let mut out = Vec::with_capacity(4 + body);
    out.extend_from_slice(&magic);
    for field in fields {
        out.extend_from_slice(&(field.len() as u32).to_be_bytes());
        out.extend_from_slice(field);
    }
    out
}

/// Decodes a framed byte string, returning all fields in order.
pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Vec<Vec<u8>>, FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::Truncated { needed: 4 - bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("slice of length 4");
    if found != magic {
        return Err(FrameError::BadMagic { expected: magic, found });
    }
    let mut fields = Vec::new();
    let mut rest = &bytes[4..];
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(FrameError::Truncated { needed: 4 - rest.len() });
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("slice of length 4")) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(FrameError::Truncated { needed: len - rest.len() });
        }
        fields.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    Ok(fields)
}

/// Decodes and additionally insists on an exact field count.
pub fn decode_exact(magic: [u8; 4], bytes: &[u8], count: usize) -> Result<Vec<Vec<u8>>, FrameError> {
    let fields = decode(magic, bytes)?;
    if fields.len() != count {
        return Err(FrameError::FieldCount { expected: count, found: fields.len() });
    }
    Ok(fields)
}

/// Copies a decoded field into a fixed-size array, for keys, nonces and
/// digests whose length is part of the format.
pub fn fixed<const N: usize>(index: usize, field: &[u8]) -> Result<[u8; N], FrameError> {
    field.try_into().map_err(|_| FrameError::BadField {
        index,
        reason: format!("expected {N} bytes, found {}", field.len()),
    })
}

/// Length-prefixed concatenation without a magic, used for signing inputs
/// and associated data where a self-describing header is unnecessary but
/// field boundaries must still be unambiguous.
pub fn concat(fields: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(fields.iter().map(|f| 4 + f.len()).sum());
    for field in fields {
        out.extend_from_slice(&(field.len() as u32).to_be_bytes());
        out.extend_from_slice(field);
    }
    out
}

/// Inverse of [`concat`]: splits a magicless length-prefixed concatenation
/// back into its fields, insisting on an exact count.
pub fn split_concat(bytes: &[u8], count: usize) -> Result<Vec<Vec<u8>>, FrameError> {
    let mut fields = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(FrameError::Truncated { needed: 4 - rest.len() });
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("slice of length 4")) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(FrameError::Truncated { needed: len - rest.len() });
        }
        fields.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    if fields.len() != count {
        return Err(FrameError::FieldCount { expected: count, found: fields.len() });
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAGIC: [u8; 4] = *b"TST1";

    #[test]
    fn round_trip_basic() {
        let fields: &[&[u8]] = &[b"alpha", b"", b"\x00\xff"];
        let bytes = encode(MAGIC, fields);
        let back = decode_exact(MAGIC, &bytes, 3).unwrap();
        assert_eq!(back, vec![b"alpha".to_vec(), vec![], vec![0x00, 0xff]]);
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = encode(MAGIC, &[b"x"]);
        let err = decode(*b"TST2", &bytes).unwrap_err();
        assert!(matches!(err, FrameError::BadMagic { .. }));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode(MAGIC, &[b"hello world"]);
        for cut in 0..bytes.len() {
            if cut == 4 {
                // Magic alone decodes as zero fields; the exact-count check
                // is what rejects it.
                assert!(decode_exact(MAGIC, &bytes[..cut], 1).is_err());
                continue;
            }
            assert!(decode(MAGIC, &bytes[..cut]).is_err(), "cut at {cut} accepted");
        }
    }

    #[test]
    fn field_count_enforced() {
        let bytes = encode(MAGIC, &[b"a", b"b"]);
        let err = decode_exact(MAGIC, &bytes, 3).unwrap_err();
        assert_eq!(err, FrameError::FieldCount { expected: 3, found: 2 });
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary(fields in proptest::collection::vec(
            proptest::collection::vec(any::<u8>(), 0..64), 0..8)) {
            let refs: Vec<&[u8]> = fields.iter().map(|f| f.as_slice()).collect();
            let bytes = encode(MAGIC, &refs);
            let back = decode_exact(MAGIC, &bytes, fields.len()).unwrap();
            prop_assert_eq!(back, fields);
        }

        #[test]
        fn concat_is_injective_on_structure(a in proptest::collection::vec(any::<u8>(), 0..32),
                                            b in proptest::collection::vec(any::<u8>(), 0..32)) {
            // Moving a byte across a field boundary must change the encoding.
            if !a.is_empty() {
                let mut a2 = a.clone();
                let mut b2 = b.clone();
                b2.insert(0, a2.pop().unwrap());
                prop_assert_ne!(concat(&[&a, &b]), concat(&[&a2, &b2]));
            }
        }
    }
}
