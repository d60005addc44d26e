use thiserror::Error;

use crate::cipher::KeyError;
use crate::codec::CodecError;
use crate::container::ContainerError;
use crate::image::PgmError;
use crate::predict::FitError;
use crate::room::RoomError;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Room(#[from] RoomError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
