// Session client: one socket, frames applied to ConsoleState in arrival
// order. The socket is injected as an interface so tests can script a mock
// server; the browser entry point passes a real WebSocket.

import type { ClientMessage, ServerFrame, SessionCreated } from "./protocol.js";
import { ConsoleState } from "./state.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
}

export class ConsoleClient {
  readonly state = new ConsoleState();
  private socket: SocketLike | null = null;

  constructor(private onFrame?: (frame: ServerFrame) => void) {}

  connect(socket: SocketLike, created?: SessionCreated): void {
    this.socket = socket;
    this.state.connection = "connecting";
    if (created) {
      this.state.scenario = created.scenario;
      this.state.step = created.step;
    }
    socket.onopen = () => {
      this.state.connection = "open";
    };
    socket.onmessage = (ev) => {
      let frame: ServerFrame;
      try {
        frame = JSON.parse(ev.data) as ServerFrame;
      } catch {
        return; // not a protocol frame
      }
      this.state.apply(frame);
      this.onFrame?.(frame);
    };
    socket.onclose = () => {
      this.state.connection = "closed";
    };
  }

  send(message: ClientMessage): void {
    if (this.socket === null || this.state.connection !== "open") return;
    this.socket.send(JSON.stringify(message));
  }

  close(): void {
    this.socket?.close();
  }
}

export async function createSession(baseUrl: string, seed: number,
                                    config?: Record<string, unknown>,
                                    ): Promise<SessionCreated> {
  const resp = await fetch(`${baseUrl}/sessions`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ seed, config: config ?? null }),
  });
  if (!resp.ok) {
    const body = await resp.json().catch(() => ({}));
    throw new Error(`session create failed: ${JSON.stringify(body)}`);
  }
  return (await resp.json()) as SessionCreated;
}

export function websocketUrl(baseUrl: string, wsPath: string): string {
  return baseUrl.replace(/^http/, "ws").replace(/\/$/, "") + wsPath;
}
