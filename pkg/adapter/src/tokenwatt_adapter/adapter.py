"""Drive an OpenAI-compatible streaming endpoint and emit phase events.

Per request: PrefillStart at send time, PrefillEnd and DecodeStart at the
first streamed content token, DecodeEnd and RequestComplete at stream end.
Token counts prefer the endpoint's usage fields and fall back to local
approximation, with the source recorded per request. Events for one
request are buffered and sent as one batch through a single serialized
writer, so per-connection ordering always holds; timestamps are monotonic
nanoseconds relative to the harness epoch received in the handshake.

Streaming is mandatory: without token streaming the prefill/decode
boundary is unobservable, so non-streaming endpoints are rejected at
startup.
"""

import argparse
import json
import os
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue

import requests


class AdapterError(Exception):
    pass


class EndpointUnreachable(AdapterError):
    pass


class StreamingNotSupported(AdapterError):
    pass


@dataclass
class AdapterConfig:
    endpoint_url: str
    model_name: str
    event_endpoint: str
    run_id: str
    prompts_file: str = ""
    concurrency: int = 1
    max_new_tokens: int = 128
    request_timeout_s: float = 120.0

    def __post_init__(self):
        if self.concurrency < 1:
            raise AdapterError(f"concurrency must be >= 1, got {self.concurrency}")
        self.endpoint_url = self.endpoint_url.rstrip("/")

    @classmethod
    def from_env(cls, endpoint_url, model_name, max_new_tokens=128, concurrency=None, request_timeout_s=120.0):
        env_batch = os.environ.get("TPB_BATCH_SIZE", "1")
        return cls(
            endpoint_url=endpoint_url,
            model_name=model_name,
            event_endpoint=os.environ["TPB_EVENT_ENDPOINT"],
            run_id=os.environ["TPB_RUN_ID"],
            prompts_file=os.environ.get("TPB_PROMPTS_FILE", ""),
            concurrency=int(concurrency if concurrency is not None else env_batch),
            max_new_tokens=max_new_tokens,
            request_timeout_s=request_timeout_s,
        )


@dataclass
class DriveSummary:
    requests: int = 0
    completed: int = 0
    failed: int = 0
    prompt_tokens: int = 0
    generated_tokens: int = 0
    usage_sourced: int = 0
    approx_sourced: int = 0

    def to_dict(self):
        return dict(self.__dict__)


class EventEmitter:
    """One socket to the harness; all sends serialized through one lock."""

    def __init__(self, endpoint: str):
        if endpoint.startswith("tcp:"):
            host, _, port = endpoint[4:].rpartition(":")
            self._sock = socket.create_connection((host, int(port)), timeout=10)
        elif endpoint.startswith("unix:"):
            self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self._sock.settimeout(10)
            self._sock.connect(endpoint[5:])
        else:
            raise AdapterError(f"bad event endpoint {endpoint!r}")
        reader = self._sock.makefile("rb")
        handshake = json.loads(reader.readline().decode("utf-8"))
        reader.close()
        self.epoch_ns = int(handshake["epoch_ns"])
        self._lock = threading.Lock()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self.epoch_ns

    def send(self, events) -> None:
        payload = b"".join(
            json.dumps(e, separators=(",", ":")).encode("utf-8") + b"\n" for e in events
        )
        with self._lock:
            self._sock.sendall(payload)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def approximate_token_count(text: str) -> int:
    return max(1, len(text.split()))


def load_prompts(path: str) -> list:
    """Harness-staged prompts: jsonl of strings; raw lines tolerated."""
    if not path:
        return []
    file = Path(path)
    if not file.exists():
        return []
    prompts = []
    for line in file.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            value = json.loads(line)
            prompts.append(value if isinstance(value, str) else str(value))
        except json.JSONDecodeError:
            prompts.append(line)
    return prompts


def check_endpoint(config: AdapterConfig) -> None:
    """Fail fast: endpoint reachable and actually streaming."""
    try:
        response = requests.get(f"{config.endpoint_url}/models", timeout=10)
        response.raise_for_status()
    except requests.RequestException as exc:
        raise EndpointUnreachable(f"{config.endpoint_url} unreachable: {exc}")
    try:
        probe = requests.post(
            f"{config.endpoint_url}/chat/completions",
            json={
                "model": config.model_name,
                "messages": [{"role": "user", "content": "ping"}],
                "max_tokens": 1,
                "stream": True,
            },
            stream=True,
            timeout=30,
        )
        probe.raise_for_status()
        content_type = probe.headers.get("Content-Type", "")
        probe.close()
    except requests.RequestException as exc:
        raise EndpointUnreachable(f"streaming probe failed: {exc}")
    if "text/event-stream" not in content_type:
        raise StreamingNotSupported(
            f"endpoint answered Content-Type {content_type!r}; token streaming is required"
        )


@dataclass
class _RequestOutcome:
    ok: bool
    events: list = field(default_factory=list)
    prompt_tokens: int = 0
    generated_tokens: int = 0
    used_usage: bool = False


def _sse_lines(response):
    """Yield SSE lines the moment they arrive.

    Byte-granular reads sidestep client-side read buffering (urllib3 2.x
    fills the requested chunk size before returning), which would otherwise
    smear token arrival times and corrupt the TTFT measurement.
    """
    buf = b""
    for byte in response.iter_content(chunk_size=1):
        buf += byte
        while b"\n" in buf:
            line, buf = buf.split(b"\n", 1)
            yield line
    if buf:
        yield buf


def _run_request(config: AdapterConfig, emitter: EventEmitter, request_id: str, prompt: str) -> _RequestOutcome:
    t_start = emitter.now_ns()
    t_first = None
    streamed_tokens = 0
    usage = None
    try:
        response = requests.post(
            f"{config.endpoint_url}/chat/completions",
            json={
                "model": config.model_name,
                "messages": [{"role": "user", "content": prompt}],
                "max_tokens": config.max_new_tokens,
                "stream": True,
                "stream_options": {"include_usage": True},
            },
            stream=True,
            timeout=config.request_timeout_s,
        )
        response.raise_for_status()
        for raw in _sse_lines(response):
            if not raw or not raw.startswith(b"data:"):
                continue
            payload = raw[5:].strip()
            if payload == b"[DONE]":
                break
            try:
                chunk = json.loads(payload)
            except json.JSONDecodeError:
                continue
            if chunk.get("usage"):
                usage = chunk["usage"]
            choices = chunk.get("choices") or []
            if choices and (choices[0].get("delta") or {}).get("content"):
                if t_first is None:
                    t_first = emitter.now_ns()
                streamed_tokens += 1
        response.close()
    except requests.RequestException:
        return _RequestOutcome(ok=False)
    t_end = emitter.now_ns()
    if t_first is None:
        t_first = t_end

    used_usage = bool(usage and usage.get("prompt_tokens"))
    prompt_tokens = (usage or {}).get("prompt_tokens") or approximate_token_count(prompt)
    generated = (usage or {}).get("completion_tokens")
    if generated is None:
        generated = streamed_tokens
    base = {"run_id": config.run_id, "request_id": request_id}
    token_source = "usage" if used_usage else "approx"
    events = [
        {"ts_ns": t_start, "kind": "PrefillStart", "prompt_tokens": prompt_tokens,
         "token_source": token_source, **base},
        {"ts_ns": t_first, "kind": "PrefillEnd", **base},
        {"ts_ns": t_first, "kind": "DecodeStart", **base},
        {"ts_ns": t_end, "kind": "DecodeEnd", **base},
        {"ts_ns": t_end, "kind": "RequestComplete", "generated_tokens": generated, **base},
    ]
    return _RequestOutcome(
        ok=True,
        events=events,
        prompt_tokens=prompt_tokens,
        generated_tokens=generated,
        used_usage=used_usage,
    )


def drive(config: AdapterConfig) -> DriveSummary:
    """Run every prompt at the configured concurrency, reporting phase events."""
    emitter = EventEmitter(config.event_endpoint)
    summary = DriveSummary()
    try:
        try:
            check_endpoint(config)
        except AdapterError:
            # Contract: an unreachable endpoint still yields a well-formed,
            # zero-request run so the harness can close out cleanly.
            emitter.send(
                [
                    {"ts_ns": emitter.now_ns(), "run_id": config.run_id, "kind": "RunStart",
                     "phase_source": "ttft-approx"},
                    {"ts_ns": emitter.now_ns(), "run_id": config.run_id, "kind": "RunEnd"},
                ]
            )
            raise

        prompts = load_prompts(config.prompts_file)
        summary.requests = len(prompts)
        emitter.send(
            [{"ts_ns": emitter.now_ns(), "run_id": config.run_id, "kind": "RunStart",
              "phase_source": "ttft-approx"}]
        )

        queue = Queue()
        for index, prompt in enumerate(prompts):
            queue.put((f"req-{index:04d}", prompt))
        lock = threading.Lock()

        def worker():
            while True:
                try:
                    request_id, prompt = queue.get_nowait()
                except Empty:
                    return
                outcome = _run_request(config, emitter, request_id, prompt)
                with lock:
                    if outcome.ok:
                        emitter.send(outcome.events)
                        summary.completed += 1
                        summary.prompt_tokens += outcome.prompt_tokens
                        summary.generated_tokens += outcome.generated_tokens
                        if outcome.used_usage:
                            summary.usage_sourced += 1
                        else:
                            summary.approx_sourced += 1
                    else:
                        summary.failed += 1

        threads = [
            threading.Thread(target=worker, daemon=True)
            for _ in range(min(config.concurrency, max(1, len(prompts))))
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        emitter.send([{"ts_ns": emitter.now_ns(), "run_id": config.run_id, "kind": "RunEnd"}])
        return summary
    finally:
        emitter.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tokenwatt-adapter",
        description="stream an OpenAI-compatible endpoint and report phase events",
    )
    parser.add_argument("--endpoint-url", required=True, help="base URL, e.g. http://127.0.0.1:8000/v1")
    parser.add_argument("--model", required=True, help="model name passed to the endpoint")
    parser.add_argument("--max-new-tokens", type=int, default=128)
    parser.add_argument("--concurrency", type=int, default=None, help="defaults to TPB_BATCH_SIZE")
    parser.add_argument("--timeout-s", type=float, default=120.0)
    args = parser.parse_args(argv)

    if "TPB_EVENT_ENDPOINT" not in os.environ or "TPB_RUN_ID" not in os.environ:
        print("error: TPB_EVENT_ENDPOINT and TPB_RUN_ID must be set (run under the harness)", file=sys.stderr)
        return 2
    try:
        config = AdapterConfig.from_env(
            endpoint_url=args.endpoint_url,
            model_name=args.model,
            max_new_tokens=args.max_new_tokens,
            concurrency=args.concurrency,
            request_timeout_s=args.timeout_s,
        )
        summary = drive(config)
    except (AdapterError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary.to_dict()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
