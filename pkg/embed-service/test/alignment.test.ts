/**
 * Alignment acceptance: random similarity-transformed template landmarks
 * must be recovered within 1e-3 (they come back far tighter), and the
 * closed-form estimator must agree with an independently derived
 * least-squares solution of the same problem.
 */

import { describe, expect, it } from "vitest";

import {
  AlignmentError,
  applyAffine,
  computeAlignment,
  similarityTransform,
  TEMPLATE_112,
  type Point,
} from "../src/alignment.js";
import type { AffineRows } from "../src/protocol.js";

function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function randomSimilarity(rand: () => number): AffineRows {
  const angle = (rand() * 2 - 1) * Math.PI;
  const scale = Math.exp((rand() * 2 - 1) * Math.log(2));
  const a = scale * Math.cos(angle);
  const b = scale * Math.sin(angle);
  return [
    [a, -b, (rand() * 2 - 1) * 50],
    [b, a, (rand() * 2 - 1) * 50],
  ];
}

/**
 * Independent oracle: the same objective solved as a generic 4-unknown
 * linear least squares via its normal equations. Model per point:
 *   u = a x - b y + tx
 *   v = b x + a y + ty
 * Unknowns theta = (a, b, tx, ty); solve (A^T A) theta = A^T r by Gaussian
 * elimination with partial pivoting.
 */
function leastSquaresSimilarity(
  src: ReadonlyArray<Point>,
  dst: ReadonlyArray<Point>,
): AffineRows {
  const ata = Array.from({ length: 4 }, () => new Float64Array(4));
  const atr = new Float64Array(4);
  for (let i = 0; i < src.length; i++) {
    const [x, y] = src[i];
    const [u, v] = dst[i];
    const rows: Array<[number[], number]> = [
      [[x, -y, 1, 0], u],
      [[y, x, 0, 1], v],
    ];
    for (const [row, rhs] of rows) {
      for (let j = 0; j < 4; j++) {
        atr[j] += row[j] * rhs;
        for (let k = 0; k < 4; k++) ata[j][k] += row[j] * row[k];
      }
    }
  }
  const m = ata.map((row, j) => [...row, atr[j]]);
  for (let col = 0; col < 4; col++) {
    let pivot = col;
    for (let r = col + 1; r < 4; r++) {
      if (Math.abs(m[r][col]) > Math.abs(m[pivot][col])) pivot = r;
    }
    [m[col], m[pivot]] = [m[pivot], m[col]];
    for (let r = 0; r < 4; r++) {
      if (r === col) continue;
      const f = m[r][col] / m[col][col];
      for (let k = col; k < 5; k++) m[r][k] -= f * m[col][k];
    }
  }
  const [a, b, tx, ty] = m.map((row, j) => row[4] / row[j]);
  return [
    [a, -b, tx],
    [b, a, ty],
  ];
}

function maxAbsDiff(left: AffineRows, right: AffineRows): number {
  let worst = 0;
  for (let r = 0; r < 2; r++) {
    for (let c = 0; c < 3; c++) {
      worst = Math.max(worst, Math.abs(left[r][c] - right[r][c]));
    }
  }
  return worst;
}

describe("computeAlignment", () => {
  it("recovers 200 random similarity transforms within 1e-3", () => {
    const rand = mulberry32(2024);
    for (let trial = 0; trial < 200; trial++) {
      const sim = randomSimilarity(rand);
      const landmarks = TEMPLATE_112.map((p) => applyAffine(sim, p));
      const recovered = computeAlignment(landmarks);
      for (let i = 0; i < landmarks.length; i++) {
        const [x, y] = applyAffine(recovered, landmarks[i]);
        expect(Math.abs(x - TEMPLATE_112[i][0])).toBeLessThanOrEqual(1e-3);
        expect(Math.abs(y - TEMPLATE_112[i][1])).toBeLessThanOrEqual(1e-3);
      }
    }
  });

  it("matches an independent normal-equations least-squares solve", () => {
    const rand = mulberry32(7);
    for (let trial = 0; trial < 50; trial++) {
      // Noisy landmarks: both estimators face a genuine least-squares
      // problem, not just an exact-recovery one.
      const sim = randomSimilarity(rand);
      const landmarks = TEMPLATE_112.map((p): Point => {
        const [x, y] = applyAffine(sim, p);
        return [x + (rand() - 0.5) * 2, y + (rand() - 0.5) * 2];
      });
      const closedForm = computeAlignment(landmarks);
      const oracle = leastSquaresSimilarity(landmarks, TEMPLATE_112 as Point[]);
      expect(maxAbsDiff(closedForm, oracle)).toBeLessThanOrEqual(1e-9);
    }
  });

  it("returns the identity transform for landmarks already on the template", () => {
    const affine = computeAlignment(TEMPLATE_112 as Point[]);
    expect(maxAbsDiff(affine, [[1, 0, 0], [0, 1, 0]])).toBeLessThanOrEqual(1e-9);
  });

  it("returns reciprocal scale for uniformly scaled landmarks", () => {
    for (const scale of [0.5, 2.0, 3.25]) {
      const landmarks = TEMPLATE_112.map(([x, y]): Point => [x * scale, y * scale]);
      const affine = computeAlignment(landmarks);
      expect(Math.abs(affine[0][0] - 1 / scale)).toBeLessThanOrEqual(1e-9);
      expect(Math.abs(affine[1][1] - 1 / scale)).toBeLessThanOrEqual(1e-9);
      expect(Math.abs(affine[0][1])).toBeLessThanOrEqual(1e-9);
      expect(Math.abs(affine[1][0])).toBeLessThanOrEqual(1e-9);
      expect(Math.abs(affine[0][2])).toBeLessThanOrEqual(1e-9);
      expect(Math.abs(affine[1][2])).toBeLessThanOrEqual(1e-9);
    }
  });

  it("rejects degenerate landmarks", () => {
    const point: Point = [30, 40];
    expect(() => computeAlignment([point, point, point, point, point])).toThrow(AlignmentError);
    expect(() => computeAlignment([point, point, point])).toThrow(AlignmentError);
  });

  it("rejects mismatched point lists", () => {
    expect(() =>
      similarityTransform([[0, 0]], [[1, 1]]),
    ).toThrow(AlignmentError);
  });
});
