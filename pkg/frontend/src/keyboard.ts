// Keyboard capture with hold semantics: one down per physical press (browser
// auto-repeat suppressed), one up per release, and synthetic key-ups for
// everything still held when the window blurs -- releasing a key must always
// stop the robot, even if we lost focus before seeing the keyup.

import type { KeyMessage, RobotKey } from "./protocol.js";

const CODE_TO_KEY: Record<string, RobotKey> = {
  ArrowLeft: "Left",
  ArrowRight: "Right",
  ArrowUp: "Up",
  ArrowDown: "Down",
  KeyD: "D",
  KeyU: "U",
  KeyP: "P",
  KeyR: "R",
};

export function mapKeyCode(code: string): RobotKey | null {
  return CODE_TO_KEY[code] ?? null;
}

export class KeyCapture {
  private held = new Set<RobotKey>();

  constructor(private send: (message: KeyMessage) => void) {}

  get heldKeys(): ReadonlySet<RobotKey> {
    return this.held;
  }

  handleKeyDown(event: { code: string; repeat?: boolean; preventDefault?: () => void }): void {
    const key = mapKeyCode(event.code);
    if (key === null) return;
    event.preventDefault?.();
    if (event.repeat || this.held.has(key)) return;
    this.held.add(key);
    this.send({ type: "key", key, action: "down" });
  }

  handleKeyUp(event: { code: string; preventDefault?: () => void }): void {
    const key = mapKeyCode(event.code);
    if (key === null) return;
    event.preventDefault?.();
    if (!this.held.has(key)) return;
    this.held.delete(key);
    this.send({ type: "key", key, action: "up" });
  }

  // Safety stop: window blur releases every held key on the robot side.
  handleBlur(): void {
    for (const key of Array.from(this.held)) {
      this.held.delete(key);
      this.send({ type: "key", key, action: "up" });
    }
  }

  attach(target: Window): () => void {
    const down = (e: KeyboardEvent) => this.handleKeyDown(e);
    const up = (e: KeyboardEvent) => this.handleKeyUp(e);
    const blur = () => this.handleBlur();
    target.addEventListener("keydown", down);
    target.addEventListener("keyup", up);
    target.addEventListener("blur", blur);
    return () => {
      target.removeEventListener("keydown", down);
      target.removeEventListener("keyup", up);
      target.removeEventListener("blur", blur);
    };
  }
}
