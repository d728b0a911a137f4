//! Box outlines and tiny bitmap labels for annotated previews.

use super::image::Image;
use crate::boxes::BBox;

/// 3×5 glyphs, one row per entry, most significant of the low three bits on
/// the left.
fn glyph(ch: char) -> [u8; 5] {
    match ch.to_ascii_lowercase() {
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 6, 5, 2],
        '7' => [7, 1, 2, 2, 2],
        '8' => [2, 5, 2, 5, 2],
        '9' => [2, 5, 3, 1, 6],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        _ => [0; 5],
    }
}

fn put(img: &mut Image, x: i64, y: i64, rgb: [f64; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.put_pixel(y as usize, x as usize, rgb);
    }
}

pub fn draw_rect(img: &mut Image, b: &BBox, rgb: [f64; 3], thickness: usize) {
    let [x0, y0, x1, y1] = b.corners().map(|v| v.round() as i64);
    for t in 0..thickness as i64 {
        for x in x0..x1 {
            put(img, x, y0 + t, rgb);
            put(img, x, y1 - 1 - t, rgb);
        }
        for y in y0..y1 {
            put(img, x0 + t, y, rgb);
            put(img, x1 - 1 - t, y, rgb);
        }
    }
}

/// Writes `text` on a filled strip whose top-left corner is `(x, y)`.
pub fn draw_label(img: &mut Image, x: i64, y: i64, text: &str, background: [f64; 3]) {
    let width = 4 * text.chars().count() as i64 + 1;
    for dy in 0..7 {
        for dx in 0..width {
            put(img, x + dx, y + dy, background);
        }
    }
    let ink = if background.iter().sum::<f64>() > 1.5 { [0.0; 3] } else { [1.0; 3] };
    for (i, ch) in text.chars().enumerate() {
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    put(img, x + 1 + 4 * i as i64 + col, y + 1 + row as i64, ink);
                }
            }
        }
    }
}
