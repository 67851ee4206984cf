use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, Serializer};

/// Compact JSON with every float written to 17 significant digits.
struct Precise;

impl Formatter for Precise {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn write_null<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        CompactFormatter.write_null(w)
    }
}

pub fn write_json<T: Serialize, W: Write>(value: &T, w: &mut W) -> io::Result<()> {
    let mut ser = Serializer::with_formatter(&mut *w, Precise);
    value.serialize(&mut ser).map_err(io::Error::other)?;
    writeln!(w)
}

pub fn write_json_file<T: Serialize>(value: &T, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_json(value, &mut w)?;
    w.flush()
}
