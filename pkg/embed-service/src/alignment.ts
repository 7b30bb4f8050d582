/**
 * Face alignment: the least-squares similarity transform taking five facial
 * landmarks to the canonical 112x112 crop template.
 *
 * The estimator is the closed-form solution of the normal equations for a
 * proper similarity [[a, -b], [b, a]] plus translation (Horn's method in
 * 2D): with both point sets centered, a and b decouple and
 *   a = sum(u·x + v·y) / sum(x² + y²),
 *   b = sum(v·x - u·y) / sum(x² + y²).
 * An exact similarity between the sets is recovered exactly; noisy
 * landmarks get the least-squares fit.
 */

import type { AffineRows } from "./protocol.js";

export type Point = [number, number];

/**
 * Canonical five-point template (left eye, right eye, nose tip, left mouth
 * corner, right mouth corner) in 112x112 crop coordinates — the standard
 * layout used by the common face-recognition stacks.
 */
export const TEMPLATE_112: ReadonlyArray<Point> = [
  [38.2946, 51.6963],
  [73.5318, 51.5014],
  [56.0252, 71.7366],
  [41.5493, 92.3655],
  [70.7299, 92.2041],
];

export class AlignmentError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "AlignmentError";
  }
}

function centroid(points: ReadonlyArray<Point>): Point {
  let cx = 0;
  let cy = 0;
  for (const [x, y] of points) {
    cx += x;
    cy += y;
  }
  return [cx / points.length, cy / points.length];
}

/**
 * Least-squares similarity (rotation + uniform scale + translation) mapping
 * `src` points onto `dst` points, as a 2x3 row matrix.
 */
export function similarityTransform(
  src: ReadonlyArray<Point>,
  dst: ReadonlyArray<Point>,
): AffineRows {
  if (src.length !== dst.length || src.length < 2) {
    throw new AlignmentError(
      `need two matched point lists of at least 2 points, got ${src.length}/${dst.length}`,
    );
  }
  const [sx, sy] = centroid(src);
  const [dx, dy] = centroid(dst);

  let dot = 0; // sum(u·x + v·y)
  let cross = 0; // sum(v·x - u·y)
  let norm = 0; // sum(x² + y²)
  for (let i = 0; i < src.length; i++) {
    const x = src[i][0] - sx;
    const y = src[i][1] - sy;
    const u = dst[i][0] - dx;
    const v = dst[i][1] - dy;
    dot += u * x + v * y;
    cross += v * x - u * y;
    norm += x * x + y * y;
  }
  if (norm < 1e-12) {
    throw new AlignmentError("degenerate landmarks: no spatial extent (no face found)");
  }
  const a = dot / norm;
  const b = cross / norm;
  if (a * a + b * b < 1e-24) {
    throw new AlignmentError("degenerate landmarks: zero-scale fit (no face found)");
  }
  const tx = dx - (a * sx - b * sy);
  const ty = dy - (b * sx + a * sy);
  return [
    [a, -b, tx],
    [b, a, ty],
  ];
}

/** Similarity mapping the given landmarks onto the 112x112 template. */
export function computeAlignment(landmarks: ReadonlyArray<Point>): AffineRows {
  if (landmarks.length !== TEMPLATE_112.length) {
    throw new AlignmentError(
      `expected ${TEMPLATE_112.length} landmarks, got ${landmarks.length}`,
    );
  }
  return similarityTransform(landmarks, TEMPLATE_112);
}

export function applyAffine(affine: AffineRows, [x, y]: Point): Point {
  const [[a, b, tx], [c, d, ty]] = affine;
  return [a * x + b * y + tx, c * x + d * y + ty];
}
