//! `.vfbin` container: a 16-byte header followed by the raw memory buffer.
//!
//! Header layout (little-endian):
//!
//! ```text
//! bytes  0..4   magic "VF01"
//! bytes  4..8   code word count (instructions occupy the buffer front)
//! bytes  8..12  entry offset, in words
//! bytes 12..16  buffer size in bytes (the payload length)
//! ```

use super::{encode, Instruction, IsaError, WORD_BYTES};

pub const VFBIN_MAGIC: [u8; 4] = *b"VF01";
pub const HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageHeader {
    pub word_count: u32,
    pub entry_word: u32,
    pub buffer_bytes: u32,
}

/// Serializes header + buffer into a `.vfbin` byte stream.
pub fn write_image(header: &ImageHeader, buffer: &[u8]) -> Vec<u8> {
    assert_eq!(buffer.len(), header.buffer_bytes as usize);
    let mut out = Vec::with_capacity(HEADER_BYTES + buffer.len());
    out.extend_from_slice(&VFBIN_MAGIC);
    out.extend_from_slice(&header.word_count.to_le_bytes());
    out.extend_from_slice(&header.entry_word.to_le_bytes());
    out.extend_from_slice(&header.buffer_bytes.to_le_bytes());
    out.extend_from_slice(buffer);
    out
}

/// Parses a `.vfbin` byte stream. Returns the header and the buffer slice.
pub fn read_image(bytes: &[u8]) -> Result<(ImageHeader, &[u8]), IsaError> {
    if bytes.len() < HEADER_BYTES {
        return Err(IsaError::TruncatedImage);
    }
    if bytes[..4] != VFBIN_MAGIC {
        return Err(IsaError::BadMagic);
    }
    let word_count = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let entry_word = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let buffer_bytes = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != buffer_bytes as usize {
        return Err(IsaError::TruncatedImage);
    }
    if (word_count as usize) * WORD_BYTES > payload.len() {
        return Err(IsaError::TruncatedImage);
    }
    if entry_word > word_count {
        return Err(IsaError::Malformed("entry offset beyond code region"));
    }
    Ok((
        ImageHeader {
            word_count,
            entry_word,
            buffer_bytes,
        },
        payload,
    ))
}

/// Encodes a program and lays it out at the front of a zero-filled buffer
/// of `buffer_bytes`, returning the serialized `.vfbin` stream.
pub fn assemble_image(
    instrs: &[Instruction],
    buffer_bytes: u32,
    entry_word: u32,
) -> Result<Vec<u8>, IsaError> {
    let code_bytes = instrs.len() * WORD_BYTES;
    if code_bytes > buffer_bytes as usize {
        return Err(IsaError::ImageTooLarge(code_bytes));
    }
    let mut buffer = Vec::with_capacity(buffer_bytes as usize);
    for i in instrs {
        buffer.extend_from_slice(&encode(i)?.to_bytes());
    }
    buffer.resize(buffer_bytes as usize, 0);
    Ok(write_image(
        &ImageHeader {
            word_count: instrs.len() as u32,
            entry_word,
            buffer_bytes,
        },
        &buffer,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let buffer = vec![0xAB; 64];
        let header = ImageHeader {
            word_count: 2,
            entry_word: 0,
            buffer_bytes: 64,
        };
        let bytes = write_image(&header, &buffer);
        let (h, payload) = read_image(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(payload, &buffer[..]);
    }

    #[test]
    fn corrupt_magic() {
        let bytes = write_image(
            &ImageHeader {
                word_count: 0,
                entry_word: 0,
                buffer_bytes: 0,
            },
            &[],
        );
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(read_image(&bad).unwrap_err(), IsaError::BadMagic);
    }

    #[test]
    fn truncated_payload() {
        let header = ImageHeader {
            word_count: 1,
            entry_word: 0,
            buffer_bytes: 32,
        };
        let bytes = write_image(&header, &vec![0; 32]);
        assert_eq!(
            read_image(&bytes[..HEADER_BYTES + 10]).unwrap_err(),
            IsaError::TruncatedImage
        );
    }
}
