// Spawns the backend server for integration tests and tears it down.

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import net from "node:net";
import os from "node:os";
import path from "node:path";

export interface TestServer {
  baseUrl: string;
  stop(): Promise<void>;
}

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = net.createServer();
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as net.AddressInfo).port;
      srv.close(() => resolve(port));
    });
    srv.on("error", reject);
  });
}

export async function startServer(
  config: Record<string, unknown> = {},
): Promise<TestServer> {
  const dir = mkdtempSync(path.join(os.tmpdir(), "adaptloop-dash-"));
  const cfgPath = path.join(dir, "config.json");
  writeFileSync(cfgPath, JSON.stringify(config));
  const port = await freePort();
  const proc: ChildProcess = spawn(
    "adaptloop",
    [
      "serve",
      "--config",
      cfgPath,
      "--data-dir",
      path.join(dir, "data"),
      "--listen",
      `127.0.0.1:${port}`,
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  let stderr = "";
  proc.stderr?.on("data", (chunk) => (stderr += chunk));

  const baseUrl = `http://127.0.0.1:${port}`;
  const deadline = Date.now() + 30_000;
  for (;;) {
    if (proc.exitCode !== null) {
      throw new Error(`server exited early (${proc.exitCode}): ${stderr}`);
    }
    try {
      const r = await fetch(`${baseUrl}/health`);
      if (r.ok) break;
    } catch {
      /* not up yet */
    }
    if (Date.now() > deadline) {
      proc.kill("SIGKILL");
      throw new Error(`server did not come up: ${stderr}`);
    }
    await sleep(100);
  }

  return {
    baseUrl,
    async stop() {
      proc.kill("SIGINT");
      const gone = new Promise<void>((resolve) => proc.on("exit", () => resolve()));
      await Promise.race([gone, sleep(5000)]);
      if (proc.exitCode === null) proc.kill("SIGKILL");
      rmSync(dir, { recursive: true, force: true });
    },
  };
}

export function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

export async function waitFor<T>(
  probe: () => Promise<T | undefined>,
  timeoutMs = 15_000,
  intervalMs = 200,
): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const value = await probe();
    if (value !== undefined) return value;
    if (Date.now() > deadline) throw new Error("waitFor: timed out");
    await sleep(intervalMs);
  }
}
