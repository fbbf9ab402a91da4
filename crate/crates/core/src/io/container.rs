//! The `.nvc` coded-image container.
//!
//! ```text
//! offset size field
//!      0    4 magic "NVC1"
//!      4    2 version (u16)
//!      6   32 model_id (checkpoint digest)
//!     38    4 width (u32)
//!     42    4 height (u32)
//!     46    1 channels (u8)
//!     47    2 latent_channels (u16)
//!     49    8 payload_bit_length (u64)
//!     57    - payload, ceil(payload_bit_length / 8) bytes
//! ```
//! All integers little-endian.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"NVC1";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 57;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("not a coded image: magic {0:02x?}, expected \"NVC1\"")]
    BadMagic([u8; 4]),
    #[error("container version {found} is not supported (this build reads version {supported})")]
    Version { found: u16, supported: u16 },
    #[error("container truncated: expected {expected_bits} bits, only {available_bits} available")]
    Truncated { expected_bits: u64, available_bits: u64 },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContainerHeader {
    pub model_id: [u8; 32],
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub latent_channels: u16,
    pub payload_bit_length: u64,
}

impl ContainerHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&VERSION.to_le_bytes());
        out[6..38].copy_from_slice(&self.model_id);
        out[38..42].copy_from_slice(&self.width.to_le_bytes());
        out[42..46].copy_from_slice(&self.height.to_le_bytes());
        out[46] = self.channels;
        out[47..49].copy_from_slice(&self.latent_channels.to_le_bytes());
        out[49..57].copy_from_slice(&self.payload_bit_length.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() >= 4 && bytes[0..4] != MAGIC {
            return Err(ContainerError::BadMagic(bytes[0..4].try_into().unwrap()));
        }
        if bytes.len() >= 6 {
            let found = u16::from_le_bytes([bytes[4], bytes[5]]);
            if found != VERSION {
                return Err(ContainerError::Version {
                    found,
                    supported: VERSION,
                });
            }
        }
        if bytes.len() < HEADER_BYTES {
            return Err(ContainerError::Truncated {
                expected_bits: HEADER_BYTES as u64 * 8,
                available_bits: bytes.len() as u64 * 8,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        Ok(Self {
            model_id: bytes[6..38].try_into().unwrap(),
            width: u32_at(38),
            height: u32_at(42),
            channels: bytes[46],
            latent_channels: u16::from_le_bytes([bytes[47], bytes[48]]),
            payload_bit_length: u64::from_le_bytes(bytes[49..57].try_into().unwrap()),
        })
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_bit_length.div_ceil(8)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let header = ContainerHeader::parse(bytes)?;
        let body = &bytes[HEADER_BYTES..];
        let needed = header.payload_bytes();
        if (body.len() as u64) < needed {
            return Err(ContainerError::Truncated {
                expected_bits: HEADER_BYTES as u64 * 8 + header.payload_bit_length,
                available_bits: bytes.len() as u64 * 8,
            });
        }
        if body.len() as u64 > needed {
            return Err(ContainerError::TrailingBytes(body.len() - needed as usize));
        }
        Ok(Self {
            header,
            payload: body.to_vec(),
        })
    }

    /// Header plus payload, in bits.
    pub fn total_bits(&self) -> u64 {
        HEADER_BYTES as u64 * 8 + self.header.payload_bit_length
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(bits: u64) -> ContainerHeader {
        ContainerHeader {
            model_id: [7; 32],
            width: 33,
            height: 17,
            channels: 3,
            latent_channels: 128,
            payload_bit_length: bits,
        }
    }

    #[test]
    fn layout_is_little_endian_and_57_bytes() {
        let bytes = header(0x0102).to_bytes();
        assert_eq!(bytes.len(), 57);
        assert_eq!(&bytes[0..4], b"NVC1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[38..42], &[33, 0, 0, 0]);
        assert_eq!(&bytes[42..46], &[17, 0, 0, 0]);
        assert_eq!(bytes[46], 3);
        assert_eq!(&bytes[47..49], &[128, 0]);
        assert_eq!(&bytes[49..57], &[2, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn truncated_payload_names_both_lengths() {
        let c = Container {
            header: header(80),
            payload: vec![1; 10],
        };
        let bytes = c.to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(
            err,
            ContainerError::Truncated {
                expected_bits: 57 * 8 + 80,
                available_bits: (57 + 7) * 8,
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("536") && msg.contains("512"), "{msg}");
    }

    #[test]
    fn rejects_magic_version_and_trailing_data() {
        let c = Container {
            header: header(8),
            payload: vec![9],
        };
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(ContainerError::BadMagic(_))));
        let mut bytes = c.to_bytes();
        bytes[4] = 2;
        assert_eq!(
            Container::from_bytes(&bytes),
            Err(ContainerError::Version { found: 2, supported: 1 })
        );
        let mut bytes = c.to_bytes();
        bytes.push(0);
        assert_eq!(Container::from_bytes(&bytes), Err(ContainerError::TrailingBytes(1)));
        assert!(matches!(
            Container::from_bytes(&c.to_bytes()[..20]),
            Err(ContainerError::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn header_round_trip(
            id in prop::array::uniform32(any::<u8>()),
            width in any::<u32>(),
            height in any::<u32>(),
            channels in any::<u8>(),
            latent in any::<u16>(),
            bits in any::<u64>(),
        ) {
            let h = ContainerHeader { model_id: id, width, height, channels, latent_channels: latent, payload_bit_length: bits };
            prop_assert_eq!(ContainerHeader::parse(&h.to_bytes()).unwrap(), h);
        }

        #[test]
        fn container_round_trip(payload in prop::collection::vec(any::<u8>(), 0..200), id in prop::array::uniform32(any::<u8>())) {
            let c = Container {
                header: ContainerHeader { model_id: id, width: 5, height: 9, channels: 3, latent_channels: 4, payload_bit_length: payload.len() as u64 * 8 },
                payload,
            };
            prop_assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }
}
