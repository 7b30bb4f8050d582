/**
 * The TCP service: newline-delimited JSON requests in, one response line per
 * request, per-connection ordering preserved. Connections are independent —
 * the server handles many at once; within one connection requests are
 * answered strictly in arrival order (handlers are synchronous).
 */

import { createServer, type Server, type Socket } from "node:net";

import { computeAlignment, AlignmentError } from "./alignment.js";
import { embedImage, type ProjectionEncoder } from "./encoders.js";
import {
  encodeResponse,
  parseRequest,
  LineSplitter,
  RequestError,
  type Response,
} from "./protocol.js";

export const DEFAULT_PORT = 7701;

export interface ServerOptions {
  models: ReadonlyArray<ProjectionEncoder>;
  host?: string;
  port?: number;
  log?: (message: string) => void;
}

/** Answer a single request line. Never throws: failures become ok:false. */
export function handleLine(line: string, models: ReadonlyArray<ProjectionEncoder>): Response {
  let id = 0;
  try {
    const request = parseRequest(line);
    id = request.id;
    if (request.op === "embed") {
      const embeddings = embedImage(
        models,
        request.pixels,
        request.width,
        request.height,
        request.affine,
      );
      return { id, ok: true, embeddings };
    }
    return { id, ok: true, affine: computeAlignment(request.landmarks) };
  } catch (err) {
    if (err instanceof RequestError) {
      return { id: err.requestId, ok: false, error: err.message };
    }
    if (err instanceof AlignmentError) {
      return { id, ok: false, error: err.message };
    }
    return { id, ok: false, error: `internal error: ${(err as Error).message}` };
  }
}

function attach(socket: Socket, models: ReadonlyArray<ProjectionEncoder>, log: (m: string) => void): void {
  socket.setEncoding("utf8");
  const splitter = new LineSplitter((line) => {
    socket.write(encodeResponse(handleLine(line, models)));
  });
  socket.on("data", (chunk: string) => {
    try {
      splitter.push(chunk);
    } catch (err) {
      // Oversized line with no newline in sight: answer once and hang up.
      socket.write(encodeResponse({ id: 0, ok: false, error: (err as Error).message }));
      socket.destroy();
    }
  });
  socket.on("error", (err) => {
    log(`connection error: ${err.message}`);
    socket.destroy();
  });
}

/** Start the service; resolves once it is listening. */
export function startServer(options: ServerOptions): Promise<{ server: Server; port: number }> {
  const host = options.host ?? "127.0.0.1";
  const port = options.port ?? DEFAULT_PORT;
  const log = options.log ?? (() => undefined);
  const server = createServer((socket) => attach(socket, options.models, log));
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(port, host, () => {
      server.removeListener("error", reject);
      const address = server.address();
      const boundPort = typeof address === "object" && address !== null ? address.port : port;
      log(`listening on ${host}:${boundPort}`);
      resolve({ server, port: boundPort });
    });
  });
}
