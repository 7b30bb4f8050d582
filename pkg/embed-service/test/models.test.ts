/**
 * Model loading: config subsets, weight files, and the startup failure
 * contract (a model that cannot load must kill the process with a nonzero
 * exit, never serve a silently degraded set it was not configured for).
 */

import { spawnSync } from "node:child_process";
import { existsSync, mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, dirname } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { CROP_SIZE } from "../src/image.js";
import {
  FEATURE_DIM,
  loadModels,
  ModelLoadError,
  ProjectionEncoder,
} from "../src/encoders.js";

const PACKAGE_ROOT = join(dirname(fileURLToPath(import.meta.url)), "..");
const MAIN_JS = join(PACKAGE_ROOT, "dist", "main.js");

function grayCrop(fill: (i: number) => number): Float64Array {
  const crop = new Float64Array(CROP_SIZE * CROP_SIZE);
  for (let i = 0; i < crop.length; i++) crop[i] = fill(i);
  return crop;
}

describe("loadModels", () => {
  it("rejects an empty model list", () => {
    expect(() => loadModels([])).toThrow(ModelLoadError);
  });

  it("rejects duplicate model names", () => {
    expect(() =>
      loadModels([
        { name: "arcface", dim: 512 },
        { name: "arcface", dim: 128 },
      ]),
    ).toThrow(ModelLoadError);
  });

  it("rejects a missing weight file", () => {
    expect(() =>
      loadModels([{ name: "arcface", dim: 512, weights: "/nonexistent/w.f32" }]),
    ).toThrow(ModelLoadError);
  });

  it("rejects a weight file of the wrong size", () => {
    const dir = mkdtempSync(join(tmpdir(), "embed-weights-"));
    const path = join(dir, "short.f32");
    writeFileSync(path, Buffer.alloc(16));
    expect(() => loadModels([{ name: "dlib", dim: 128, weights: path }])).toThrow(
      /expected 131072/,
    );
  });

  it("loads a valid weight file and uses its values", () => {
    const dim = 4;
    const dir = mkdtempSync(join(tmpdir(), "embed-weights-"));
    const path = join(dir, "tiny.f32");
    const weights = new Float32Array(dim * FEATURE_DIM);
    for (let i = 0; i < weights.length; i++) weights[i] = Math.sin(i * 0.37);
    writeFileSync(path, Buffer.from(weights.buffer));

    const [fromFile] = loadModels([{ name: "tiny", dim, weights: path }]);
    const [fromSeed] = loadModels([{ name: "tiny", dim }]);
    const crop = grayCrop((i) => (i % 97) / 97);
    const byFile = fromFile.embedCrop(crop);
    const bySeed = fromSeed.embedCrop(crop);
    expect(byFile).toHaveLength(dim);
    // Same name, different weight source: the embeddings must differ.
    expect(Array.from(byFile)).not.toEqual(Array.from(bySeed));
  });

  it("derives deterministic weights from the model name", () => {
    const [a] = loadModels([{ name: "arcface", dim: 64 }]);
    const [b] = loadModels([{ name: "arcface", dim: 64 }]);
    const crop = grayCrop((i) => ((i * 31) % 113) / 113);
    expect(Array.from(a.embedCrop(crop))).toEqual(Array.from(b.embedCrop(crop)));
  });

  it("gives different models different embeddings", () => {
    const [a, b] = loadModels([
      { name: "arcface", dim: 128 },
      { name: "facenet", dim: 128 },
    ]);
    const crop = grayCrop((i) => ((i * 7) % 101) / 101);
    expect(Array.from(a.embedCrop(crop))).not.toEqual(Array.from(b.embedCrop(crop)));
  });

  it("rejects an invalid crop size at embed time", () => {
    const [model] = loadModels([{ name: "dlib", dim: 8 }]);
    expect(() => model.embedCrop(new Float64Array(10))).toThrow(/expected/);
  });

  it("rejects nonsense dimensions", () => {
    expect(() => new ProjectionEncoder({ name: "x", dim: 0 })).toThrow(ModelLoadError);
    expect(() => new ProjectionEncoder({ name: "", dim: 8 })).toThrow(ModelLoadError);
  });
});

describe.skipIf(!existsSync(MAIN_JS))("service process", () => {
  it("exits nonzero when a configured model fails to load", () => {
    const dir = mkdtempSync(join(tmpdir(), "embed-config-"));
    const config = join(dir, "models.json");
    writeFileSync(
      config,
      JSON.stringify({
        models: [{ name: "arcface", dim: 512, weights: join(dir, "missing.f32") }],
      }),
    );
    const result = spawnSync(process.execPath, [MAIN_JS, "--config", config], {
      encoding: "utf8",
      timeout: 20_000,
    });
    expect(result.status).not.toBe(0);
    expect(result.stderr).toContain("cannot read weight file");
  });

  it("exits nonzero on a malformed config", () => {
    const dir = mkdtempSync(join(tmpdir(), "embed-config-"));
    const config = join(dir, "models.json");
    writeFileSync(config, JSON.stringify({ wrong: true }));
    const result = spawnSync(process.execPath, [MAIN_JS, "--config", config], {
      encoding: "utf8",
      timeout: 20_000,
    });
    expect(result.status).not.toBe(0);
  });
});
