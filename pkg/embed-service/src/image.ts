/**
 * Pixel-level helpers: grayscale conversion, the affine crop warp, and an
 * area-average resize. All deterministic, all plain arrays.
 *
 * Coordinate convention (shared with the training-side client): a pixel
 * (x, y) samples continuous image coordinates (x, y); the crop affine maps
 * image coordinates to crop coordinates, so producing the crop inverts the
 * linear part and samples bilinearly, with out-of-bounds contributions
 * exactly zero.
 */

import type { AffineRows } from "./protocol.js";

export const CROP_SIZE = 112;

/** Row-major RGB8 bytes -> grayscale in [0, 1] (channel mean). */
export function toGray(pixels: Uint8Array, width: number, height: number): Float64Array {
  const n = width * height;
  if (pixels.length !== n * 3) {
    throw new Error(`pixel buffer is ${pixels.length} bytes, expected ${n * 3}`);
  }
  const gray = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    gray[i] = (pixels[3 * i] + pixels[3 * i + 1] + pixels[3 * i + 2]) / (3 * 255);
  }
  return gray;
}

/**
 * Bilinear warp of a grayscale image into a size x size crop.
 *
 * `affine` maps image pixel coordinates to crop coordinates; each crop pixel
 * (u, v) therefore samples the image at A_lin^-1 ((u, v) - A_t). Samples
 * outside the image contribute zero (no edge clamping).
 */
export function warpGray(
  gray: Float64Array,
  width: number,
  height: number,
  affine: AffineRows,
  size = CROP_SIZE,
): Float64Array {
  const [[a, b, tx], [c, d, ty]] = affine;
  const det = a * d - b * c;
  if (Math.abs(det) < 1e-12) {
    throw new Error("affine linear part is singular");
  }
  const ia = d / det;
  const ib = -b / det;
  const ic = -c / det;
  const id = a / det;

  const out = new Float64Array(size * size);
  for (let v = 0; v < size; v++) {
    for (let u = 0; u < size; u++) {
      const cx = u - tx;
      const cy = v - ty;
      const sx = ia * cx + ib * cy;
      const sy = ic * cx + id * cy;
      const x0 = Math.floor(sx);
      const y0 = Math.floor(sy);
      const wx = sx - x0;
      const wy = sy - y0;
      let acc = 0;
      for (const [xi, yi, wgt] of [
        [x0, y0, (1 - wx) * (1 - wy)],
        [x0 + 1, y0, wx * (1 - wy)],
        [x0, y0 + 1, (1 - wx) * wy],
        [x0 + 1, y0 + 1, wx * wy],
      ] as Array<[number, number, number]>) {
        if (xi >= 0 && xi < width && yi >= 0 && yi < height) {
          acc += wgt * gray[yi * width + xi];
        }
      }
      out[v * size + u] = acc;
    }
  }
  return out;
}

/**
 * Area-average resize (exact box integration over source pixels). For
 * integer reduction factors this is the plain block mean; 112 -> 16 averages
 * exact 7x7 blocks.
 */
export function resizeArea(
  src: Float64Array,
  width: number,
  height: number,
  outW: number,
  outH: number,
): Float64Array {
  const out = new Float64Array(outW * outH);
  const sx = width / outW;
  const sy = height / outH;
  for (let oy = 0; oy < outH; oy++) {
    const y0 = oy * sy;
    const y1 = (oy + 1) * sy;
    for (let ox = 0; ox < outW; ox++) {
      const x0 = ox * sx;
      const x1 = (ox + 1) * sx;
      let acc = 0;
      for (let iy = Math.floor(y0); iy < Math.min(Math.ceil(y1), height); iy++) {
        const hy = Math.min(y1, iy + 1) - Math.max(y0, iy);
        if (hy <= 0) continue;
        for (let ix = Math.floor(x0); ix < Math.min(Math.ceil(x1), width); ix++) {
          const hx = Math.min(x1, ix + 1) - Math.max(x0, ix);
          if (hx <= 0) continue;
          acc += hx * hy * src[iy * width + ix];
        }
      }
      out[oy * outW + ox] = acc / (sx * sy);
    }
  }
  return out;
}
