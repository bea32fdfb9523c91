//! Named colours that questions can refer to.

use crate::image::Rgb;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: Rgb,
}

/// Ten colours; none of them is the pure-red marker colour.
pub const PALETTE: [NamedColor; 10] = [
    NamedColor { name: "black", rgb: [0.0, 0.0, 0.0] },
    NamedColor { name: "white", rgb: [1.0, 1.0, 1.0] },
    NamedColor { name: "red", rgb: [0.8, 0.15, 0.15] },
    NamedColor { name: "green", rgb: [0.1, 0.6, 0.2] },
    NamedColor { name: "blue", rgb: [0.15, 0.25, 0.85] },
    NamedColor { name: "yellow", rgb: [0.95, 0.85, 0.1] },
    NamedColor { name: "purple", rgb: [0.55, 0.2, 0.7] },
    NamedColor { name: "orange", rgb: [1.0, 0.55, 0.05] },
    NamedColor { name: "gray", rgb: [0.5, 0.5, 0.5] },
    NamedColor { name: "pale green", rgb: [0.6, 0.95, 0.6] },
];

pub const WHITE: usize = 1;

/// Marker colour for highlighted regions; reserved, never used elsewhere.
pub const MARKER: Rgb = [1.0, 0.0, 0.0];

/// "pale green" → "Pale Green"
pub fn title_case(name: &str) -> alloc::string::String {
    let mut out = alloc::string::String::with_capacity(name.len());
    let mut up = true;
    for c in name.chars() {
        if up {
            out.extend(c.to_uppercase());
        } else {
            out.push(c);
        }
        up = c == ' ';
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marker_is_not_in_palette() {
        assert!(PALETTE.iter().all(|c| c.rgb != MARKER));
        assert_eq!(title_case("pale green"), "Pale Green");
    }
}
