import asyncio

from cli.__main__ import cli

if __name__ == "__main__":
    asyncio.run(cli())
