//! Machine state: the loaded memory buffer and code region bookkeeping.

use super::{DeviceConfig, DeviceError};
use crate::isa::{self, Word128, WORD_BYTES};

/// Selects which operand payload of a code word a [`write_code`] patch
/// targets. The encoding carries a single 32-bit immediate payload, so the
/// selector names the source slot that must hold it.
///
/// [`write_code`]: MachineState::write_code
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImmField(pub u8);

impl ImmField {
    pub const IMMEDIATE: ImmField = ImmField(u8::MAX);
}

/// A loaded machine: the memory buffer (code words at the front, data
/// after), the code region size, the entry point and the cycle counter of
/// the last run.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub config: DeviceConfig,
    pub buffer: Vec<u8>,
    pub code_words: u32,
    pub entry_word: u32,
    pub cycle: u64,
}

/// Parses a `.vfbin` image and builds a machine with zeroed registers and
/// a zero cycle counter.
pub fn load_image(image: &[u8], config: &DeviceConfig) -> Result<MachineState, DeviceError> {
    config.validate()?;
    let (header, payload) = isa::read_image(image).map_err(|e| match e {
        isa::IsaError::BadMagic => DeviceError::BadMagic,
        other => DeviceError::BadImage(other),
    })?;
    if payload.len() > config.max_image_bytes as usize {
        return Err(DeviceError::ImageTooLarge(
            payload.len(),
            config.max_image_bytes as usize,
        ));
    }
    Ok(MachineState {
        config: config.clone(),
        buffer: payload.to_vec(),
        code_words: header.word_count,
        entry_word: header.entry_word,
        cycle: 0,
    })
}

impl MachineState {
    pub fn code_word(&self, idx: u32) -> Result<Word128, DeviceError> {
        if idx >= self.code_words {
            return Err(DeviceError::OutOfRange(idx as u64));
        }
        let off = idx as usize * WORD_BYTES;
        Ok(Word128::from_bytes(&self.buffer[off..off + WORD_BYTES]))
    }

    /// Patches the immediate payload of the code word at `addr`. The
    /// backing memory is updated immediately; instruction fetch keeps
    /// seeing the stale encoding until the containing cache line is
    /// evicted or an `ICINV` executes.
    pub fn write_code(&mut self, addr: u32, field: ImmField, value: u32) -> Result<(), DeviceError> {
        if addr >= self.code_words {
            return Err(DeviceError::OutOfRange(addr as u64));
        }
        let word = self.code_word(addr)?;
        if field != ImmField::IMMEDIATE {
            // slot selector: the named source slot must hold the immediate
            let instr = isa::decode(word).map_err(|e| DeviceError::Trap {
                pc: addr,
                reason: e.to_string(),
            })?;
            match instr.srcs().get(field.0 as usize) {
                Some(crate::isa::Operand::Imm(_)) => {}
                _ => return Err(DeviceError::NotAnImmediate(addr)),
            }
        }
        let patched = isa::patch_immediate(word, value);
        let off = addr as usize * WORD_BYTES;
        self.buffer[off..off + WORD_BYTES].copy_from_slice(&patched.to_bytes());
        Ok(())
    }
}
