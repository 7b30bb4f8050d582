#!/usr/bin/env node
/**
 * Entry point: load the model set from a config file (or the built-in
 * default set), then serve. A model that fails to load makes the process
 * exit nonzero immediately — a half-loaded service is worse than a dead one.
 *
 * Usage:
 *   embed-service [--port 7701] [--host 127.0.0.1] [--config models.json]
 *
 * Config file shape:
 *   {"models": [{"name": "arcface", "dim": 512, "weights": "arcface.f32"}]}
 * Omitting "weights" selects the deterministic built-in matrix for that
 * model; listing fewer models runs the service in degraded-subset mode.
 */

import { readFileSync } from "node:fs";
import process from "node:process";

import { DEFAULT_MODELS, loadModels, ModelLoadError, type ModelConfig } from "./encoders.js";
import { startServer, DEFAULT_PORT } from "./server.js";

interface CliOptions {
  port: number;
  host: string;
  configPath: string | null;
}

function parseArgs(argv: string[]): CliOptions {
  const options: CliOptions = { port: DEFAULT_PORT, host: "127.0.0.1", configPath: null };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    const next = () => {
      i += 1;
      if (i >= argv.length) throw new Error(`${arg} needs a value`);
      return argv[i];
    };
    if (arg === "--port") {
      options.port = Number(next());
      if (!Number.isInteger(options.port) || options.port < 0 || options.port > 65535) {
        throw new Error("--port must be an integer in [0, 65535]");
      }
    } else if (arg === "--host") {
      options.host = next();
    } else if (arg === "--config") {
      options.configPath = next();
    } else if (arg === "--help" || arg === "-h") {
      console.log("usage: embed-service [--port N] [--host H] [--config PATH]");
      process.exit(0);
    } else {
      throw new Error(`unknown argument ${arg}`);
    }
  }
  return options;
}

function readConfig(path: string): ModelConfig[] {
  const raw = JSON.parse(readFileSync(path, "utf8")) as { models?: ModelConfig[] };
  if (!raw || !Array.isArray(raw.models)) {
    throw new ModelLoadError(`config ${path} must contain a "models" array`);
  }
  return raw.models;
}

async function main(): Promise<void> {
  const options = parseArgs(process.argv.slice(2));
  const configs = options.configPath ? readConfig(options.configPath) : DEFAULT_MODELS;
  const models = loadModels(configs);
  const names = models.map((m) => `${m.name}/${m.dim}`).join(", ");
  const { port } = await startServer({
    models,
    host: options.host,
    port: options.port,
    log: (message) => console.error(`[embed-service] ${message}`),
  });
  console.error(`[embed-service] serving ${models.length} model(s): ${names} on port ${port}`);
}

main().catch((err) => {
  console.error(`[embed-service] fatal: ${(err as Error).message}`);
  process.exit(1);
});
