/**
 * Embedding models. Each model reduces a 112x112 grayscale crop to a 16x16
 * feature patch, mean-subtracts it, applies a dim x 256 projection matrix,
 * and L2-normalizes the result.
 *
 * The projection weights come from a weight file when the config names one
 * (raw little-endian float32, dim*256 values); otherwise a deterministic
 * matrix is derived from the model name, which keeps the service fully
 * functional — same wire contract, same dimensions — on machines without
 * the real model files. Real weights drop in behind the same interface.
 */

import { readFileSync } from "node:fs";

import { CROP_SIZE, resizeArea, toGray, warpGray } from "./image.js";
import type { AffineRows, EmbeddingOut } from "./protocol.js";

export const FEATURE_SIDE = 16;
export const FEATURE_DIM = FEATURE_SIDE * FEATURE_SIDE;

export interface ModelConfig {
  name: string;
  dim: number;
  /** Path to a raw float32 weight file; omit for the derived fallback matrix. */
  weights?: string;
  /** Override the name-derived seed of the fallback matrix. */
  seed?: number;
}

export const DEFAULT_MODELS: ModelConfig[] = [
  { name: "arcface", dim: 512 },
  { name: "facenet", dim: 512 },
  { name: "dlib", dim: 128 },
];

export class ModelLoadError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ModelLoadError";
  }
}

/** Deterministic 32-bit PRNG (mulberry32). */
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

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

/** Standard normal samples via Box-Muller over mulberry32. */
function gaussianMatrix(seed: number, rows: number, cols: number): Float64Array {
  const rand = mulberry32(seed);
  const out = new Float64Array(rows * cols);
  for (let i = 0; i < out.length; i += 2) {
    let u1 = rand();
    while (u1 <= Number.EPSILON) u1 = rand();
    const u2 = rand();
    const radius = Math.sqrt(-2 * Math.log(u1));
    out[i] = radius * Math.cos(2 * Math.PI * u2);
    if (i + 1 < out.length) out[i + 1] = radius * Math.sin(2 * Math.PI * u2);
  }
  return out;
}

function loadWeightFile(path: string, dim: number): Float64Array {
  let raw: Buffer;
  try {
    raw = readFileSync(path);
  } catch (err) {
    throw new ModelLoadError(`cannot read weight file ${path}: ${(err as Error).message}`);
  }
  const expected = dim * FEATURE_DIM * 4;
  if (raw.length !== expected) {
    throw new ModelLoadError(
      `weight file ${path} is ${raw.length} bytes, expected ${expected} ` +
        `(${dim}x${FEATURE_DIM} float32)`,
    );
  }
  const out = new Float64Array(dim * FEATURE_DIM);
  for (let i = 0; i < out.length; i++) {
    out[i] = raw.readFloatLE(i * 4);
  }
  return out;
}

export class ProjectionEncoder {
  readonly name: string;
  readonly dim: number;
  private readonly weights: Float64Array;

  constructor(config: ModelConfig) {
    if (!config.name || !Number.isInteger(config.dim) || config.dim < 1) {
      throw new ModelLoadError(`invalid model config: ${JSON.stringify(config)}`);
    }
    this.name = config.name;
    this.dim = config.dim;
    this.weights = config.weights
      ? loadWeightFile(config.weights, config.dim)
      : gaussianMatrix(config.seed ?? fnv1a(config.name), config.dim, FEATURE_DIM);
  }

  /** Embed a grayscale crop (CROP_SIZE x CROP_SIZE, values in [0, 1]). */
  embedCrop(crop: Float64Array): Float64Array {
    if (crop.length !== CROP_SIZE * CROP_SIZE) {
      throw new Error(`crop has ${crop.length} values, expected ${CROP_SIZE * CROP_SIZE}`);
    }
    const feat = resizeArea(crop, CROP_SIZE, CROP_SIZE, FEATURE_SIDE, FEATURE_SIDE);
    let mean = 0;
    for (const v of feat) mean += v;
    mean /= feat.length;

    const out = new Float64Array(this.dim);
    for (let r = 0; r < this.dim; r++) {
      let acc = 0;
      const base = r * FEATURE_DIM;
      for (let c = 0; c < FEATURE_DIM; c++) {
        acc += this.weights[base + c] * (feat[c] - mean);
      }
      out[r] = acc;
    }

    let norm = 0;
    for (const v of out) norm += v * v;
    norm = Math.sqrt(norm);
    if (norm < 1e-12) {
      // A constant image projects to zero; answer with a fixed unit vector
      // rather than NaN so the unit-norm contract holds unconditionally.
      out.fill(0);
      out[0] = 1;
      return out;
    }
    for (let i = 0; i < out.length; i++) out[i] /= norm;
    return out;
  }
}

/** The full image -> crop -> per-model embeddings pipeline. */
export function embedImage(
  models: ReadonlyArray<ProjectionEncoder>,
  pixels: Uint8Array,
  width: number,
  height: number,
  affine: AffineRows | null,
): EmbeddingOut[] {
  const gray = toGray(pixels, width, height);
  const crop = affine
    ? warpGray(gray, width, height, affine, CROP_SIZE)
    : width === CROP_SIZE && height === CROP_SIZE
      ? gray
      : resizeArea(gray, width, height, CROP_SIZE, CROP_SIZE);
  return models.map((model) => ({
    name: model.name,
    dim: model.dim,
    values: Array.from(model.embedCrop(crop)),
  }));
}

/**
 * Instantiate every configured model. Any failure throws ModelLoadError —
 * the caller is expected to exit nonzero rather than serve a partial set it
 * was not configured for. (Serving a deliberate subset is done by listing a
 * subset in the config.)
 */
export function loadModels(configs: ReadonlyArray<ModelConfig>): ProjectionEncoder[] {
  if (configs.length === 0) {
    throw new ModelLoadError("model list is empty; configure at least one model");
  }
  const seen = new Set<string>();
  for (const config of configs) {
    if (seen.has(config.name)) {
      throw new ModelLoadError(`duplicate model name ${JSON.stringify(config.name)}`);
    }
    seen.add(config.name);
  }
  return configs.map((config) => new ProjectionEncoder(config));
}
