/**
 * Wire protocol: newline-delimited JSON over TCP.
 *
 * Request lines:
 *   {"id": u64, "op": "embed", "width": W, "height": H,
 *    "pixels_b64": base64 of row-major RGB8,
 *    "affine": [[a,b,tx],[c,d,ty]] | null}
 *   {"id": u64, "op": "align", "landmarks": [[x,y] x 5]}
 *
 * Response lines:
 *   {"id": u64, "ok": true, "embeddings": [{"name","dim","values"}, ...]}
 *   {"id": u64, "ok": true, "affine": [[a,b,tx],[c,d,ty]]}
 *   {"id": u64, "ok": false, "error": "..."}
 *
 * Every request line gets exactly one response line, in order. A line whose
 * id cannot be recovered (unparseable JSON, missing/invalid id) is answered
 * with id 0 so the response still matches the schema.
 */

export type AffineRows = [[number, number, number], [number, number, number]];

export interface EmbedRequest {
  id: number;
  op: "embed";
  width: number;
  height: number;
  pixels: Uint8Array;
  affine: AffineRows | null;
}

export interface AlignRequest {
  id: number;
  op: "align";
  landmarks: Array<[number, number]>;
}

export type Request = EmbedRequest | AlignRequest;

export interface EmbeddingOut {
  name: string;
  dim: number;
  values: number[];
}

export type Response =
  | { id: number; ok: true; embeddings: EmbeddingOut[] }
  | { id: number; ok: true; affine: AffineRows }
  | { id: number; ok: false; error: string };

/** Thrown by parseRequest; carries the id to echo (0 when unrecoverable). */
export class RequestError extends Error {
  readonly requestId: number;

  constructor(requestId: number, message: string) {
    super(message);
    this.name = "RequestError";
    this.requestId = requestId;
  }
}

const MAX_SIDE = 4096;
const MAX_PIXELS = 4_000_000;
export const LANDMARK_COUNT = 5;

function isPlainObject(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function recoverId(value: unknown): number {
  if (!isPlainObject(value)) return 0;
  const id = value["id"];
  return typeof id === "number" && Number.isInteger(id) && id >= 0 ? id : 0;
}

function parseAffine(id: number, raw: unknown): AffineRows | null {
  if (raw === null || raw === undefined) return null;
  if (
    !Array.isArray(raw) ||
    raw.length !== 2 ||
    !raw.every(
      (row) =>
        Array.isArray(row) &&
        row.length === 3 &&
        row.every((v) => typeof v === "number" && Number.isFinite(v)),
    )
  ) {
    throw new RequestError(id, "affine must be a 2x3 matrix of finite numbers or null");
  }
  const [[a, b], [c, d]] = raw as AffineRows;
  if (Math.abs(a * d - b * c) < 1e-12) {
    throw new RequestError(id, "affine linear part is singular");
  }
  return raw as AffineRows;
}

function parseEmbed(id: number, obj: Record<string, unknown>): EmbedRequest {
  const width = obj["width"];
  const height = obj["height"];
  for (const [label, v] of [["width", width], ["height", height]] as const) {
    if (typeof v !== "number" || !Number.isInteger(v) || v < 1) {
      throw new RequestError(id, `${label} must be a positive integer`);
    }
    if (v > MAX_SIDE) {
      throw new RequestError(id, `${label} ${v} exceeds the ${MAX_SIDE} px limit`);
    }
  }
  const w = width as number;
  const h = height as number;
  if (w * h > MAX_PIXELS) {
    throw new RequestError(id, `image ${w}x${h} exceeds the ${MAX_PIXELS}-pixel limit`);
  }
  const b64 = obj["pixels_b64"];
  if (typeof b64 !== "string") {
    throw new RequestError(id, "pixels_b64 must be a base64 string");
  }
  const pixels = Buffer.from(b64, "base64");
  if (pixels.length !== w * h * 3) {
    throw new RequestError(
      id,
      `pixels_b64 decodes to ${pixels.length} bytes, expected ${w * h * 3} (${w}x${h} RGB8)`,
    );
  }
  return { id, op: "embed", width: w, height: h, pixels, affine: parseAffine(id, obj["affine"]) };
}

function parseAlign(id: number, obj: Record<string, unknown>): AlignRequest {
  const raw = obj["landmarks"];
  if (raw === undefined || raw === null) {
    throw new RequestError(id, "no face found: align requests must carry landmarks");
  }
  if (
    !Array.isArray(raw) ||
    raw.length !== LANDMARK_COUNT ||
    !raw.every(
      (p) =>
        Array.isArray(p) &&
        p.length === 2 &&
        p.every((v) => typeof v === "number" && Number.isFinite(v)),
    )
  ) {
    throw new RequestError(id, `landmarks must be ${LANDMARK_COUNT} finite [x,y] pairs`);
  }
  return { id, op: "align", landmarks: raw as Array<[number, number]> };
}

/** Parse one request line. Throws RequestError with the id to echo. */
export function parseRequest(line: string): Request {
  let value: unknown;
  try {
    value = JSON.parse(line);
  } catch (err) {
    throw new RequestError(0, `invalid JSON: ${(err as Error).message}`);
  }
  if (!isPlainObject(value)) {
    throw new RequestError(0, "request must be a JSON object");
  }
  const id = value["id"];
  if (typeof id !== "number" || !Number.isInteger(id) || id < 0) {
    throw new RequestError(0, "id must be a non-negative integer");
  }
  const op = value["op"];
  if (op === "embed") return parseEmbed(id, value);
  if (op === "align") return parseAlign(id, value);
  throw new RequestError(id, `unsupported op ${JSON.stringify(op)}; expected "embed" or "align"`);
}

export function encodeResponse(response: Response): string {
  return JSON.stringify(response) + "\n";
}

/**
 * Incremental newline splitter for a socket stream. Feeds complete lines
 * (already trimmed of the terminating newline) to the callback; blank lines
 * are skipped. The buffer cap bounds memory against a peer that never sends
 * a newline.
 */
export class LineSplitter {
  private buffer = "";

  constructor(
    private readonly onLine: (line: string) => void,
    private readonly maxBuffered = 64 * 1024 * 1024,
  ) {}

  push(chunk: string): void {
    this.buffer += chunk;
    if (this.buffer.length > this.maxBuffered) {
      this.buffer = "";
      throw new RequestError(0, "request line exceeds the buffer limit");
    }
    for (;;) {
      const idx = this.buffer.indexOf("\n");
      if (idx === -1) break;
      const line = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 1);
      if (line.trim().length > 0) this.onLine(line);
    }
  }
}
